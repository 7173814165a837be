use std::cell::{Cell, RefCell};

use super::kernels::{col2im, im2col, invert_axes, permute_data, ConvGeom};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddSuffix(usize, usize),
    MulSuffix(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    LayerNorm(usize, f64),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        // per-channel statistics used by the forward pass
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
        stride: usize,
    },
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    IndexSelect(usize, usize, Vec<usize>),
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of operations; replayed in reverse by [`Tape::backward`].
pub struct Tape<E: Scalar = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, E: Scalar = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Scalar> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E: Scalar> Copy for Var<'_, E> {}

impl<E: Scalar> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, var: Var<'_, E>) -> Option<&[E]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_, E>) -> Option<Vec<E>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running estimates.
    pub var: Vec<f64>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn f<E: Scalar>(x: E) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<E>) -> Var<'_, E> {
        let needs = t.requires_grad();
        let value = Tensor {
            grad: None,
            ..t
        };
        self.push_raw(value, Op::Leaf, needs)
    }

    /// Records a copy of `t`, tracking gradients iff `t.requires_grad()`.
    pub fn param(&self, t: &Tensor<E>) -> Var<'_, E> {
        let needs = t.requires_grad();
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: needs,
            grad: None,
        };
        self.push_raw(value, Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, t: Tensor<E>) -> Var<'_, E> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a trainable leaf.
    pub fn var(&self, t: Tensor<E>) -> Var<'_, E> {
        self.leaf(t.with_requires_grad(true))
    }

    fn push_raw(&self, value: Tensor<E>, op: Op, needs_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<E>, op: Op, parents: &[usize]) -> Var<'_, E> {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let op = if needs { op } else { Op::Leaf };
        self.push_raw(value, op, needs)
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Tensor<E>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape cannot be swept twice.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        if !root.needs_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.id] = Some(vec![E::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(g);
                continue;
            }
            backward_op(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }
}

fn acc<E: Scalar>(nodes: &[Node<E>], grads: &mut [Option<Vec<E>>], id: usize, g: Vec<E>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn needs<E: Scalar>(nodes: &[Node<E>], id: usize) -> bool {
    nodes[id].needs_grad
}

#[allow(clippy::too_many_lines)]
fn backward_op<E: Scalar>(nodes: &[Node<E>], id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.to_vec());
            acc(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.to_vec());
            acc(nodes, grads, *b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if needs(nodes, *a) {
                acc(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            }
            if needs(nodes, *b) {
                acc(nodes, grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if needs(nodes, *a) {
                acc(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
            }
            if needs(nodes, *b) {
                let gb = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect();
                acc(nodes, grads, *b, gb);
            }
        }
        Op::AddSuffix(a, b) => {
            acc(nodes, grads, *a, g.to_vec());
            if needs(nodes, *b) {
                let n = val(*b).numel();
                let mut gb = vec![E::zero(); n];
                for chunk in g.chunks_exact(n) {
                    gb.iter_mut().zip(chunk).for_each(|(s, &x)| *s += x);
                }
                acc(nodes, grads, *b, gb);
            }
        }
        Op::MulSuffix(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let n = bv.len();
            if needs(nodes, *a) {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * bv[i % n])
                    .collect();
                acc(nodes, grads, *a, ga);
            }
            if needs(nodes, *b) {
                let mut gb = vec![E::zero(); n];
                for (i, (&x, &a)) in g.iter().zip(av).enumerate() {
                    gb[i % n] += x * a;
                }
                acc(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            let c = E::c(*c);
            acc(nodes, grads, *a, g.iter().map(|&x| x * c).collect());
        }
        Op::AddScalar(a) => acc(nodes, grads, *a, g.to_vec()),
        Op::MatMul(a, b) => matmul_backward(nodes, *a, *b, g, grads),
        Op::Permute(a, axes) => {
            let (_, data) = permute_data(g, out.shape(), &invert_axes(axes));
            acc(nodes, grads, *a, data);
        }
        Op::Reshape(a) => acc(nodes, grads, *a, g.to_vec()),
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![E::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n)
                        .map(|j| f(g[base + j * inner]) * f(y[base + j * inner]))
                        .sum();
                    for j in 0..n {
                        let k = base + j * inner;
                        gx[k] = E::c(f(y[k]) * (f(g[k]) - dot));
                    }
                }
            }
            acc(nodes, grads, *a, gx);
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![E::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let gsum: f64 = (0..n).map(|j| f(g[base + j * inner])).sum();
                    for j in 0..n {
                        let k = base + j * inner;
                        gx[k] = E::c(f(g[k]) - f(y[k]).exp() * gsum);
                    }
                }
            }
            acc(nodes, grads, *a, gx);
        }
        Op::Log(a) => {
            let x = val(*a).data();
            acc(nodes, grads, *a, g.iter().zip(x).map(|(&g, &x)| g / x).collect());
        }
        Op::Exp(a) => {
            let y = out.data();
            acc(nodes, grads, *a, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
        }
        Op::Square(a) => {
            let x = val(*a).data();
            let two = E::c(2.0);
            acc(nodes, grads, *a, g.iter().zip(x).map(|(&g, &x)| two * g * x).collect());
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            let gx = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > E::zero() { g } else { E::zero() })
                .collect();
            acc(nodes, grads, *a, gx);
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(*a).data();
            let s = E::c(*slope);
            let gx = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > E::zero() { g } else { g * s })
                .collect();
            acc(nodes, grads, *a, gx);
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let gx = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    let x = f(x);
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    E::c(f(g) * d)
                })
                .collect();
            acc(nodes, grads, *a, gx);
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            let gx = g
                .iter()
                .zip(y)
                .map(|(&g, &y)| g * y * (E::one() - y))
                .collect();
            acc(nodes, grads, *a, gx);
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            let (lo, hi) = (E::c(*lo), E::c(*hi));
            let gx = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x >= lo && x <= hi { g } else { E::zero() })
                .collect();
            acc(nodes, grads, *a, gx);
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            acc(nodes, grads, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = val(*a).numel();
            acc(nodes, grads, *a, vec![g[0] / E::c(n as f64); n]);
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (outer, n, inner) = axis_split(val(*a).shape(), *axis);
            let scale = if matches!(nodes[id].op, Op::MeanAxis(..)) {
                E::c(1.0 / n as f64)
            } else {
                E::one()
            };
            let mut gx = vec![E::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        gx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            acc(nodes, grads, *a, gx);
        }
        Op::LayerNorm(a, eps) => {
            let x = val(*a).data();
            let d = *val(*a).shape().last().unwrap_or(&1);
            let mut gx = vec![E::zero(); x.len()];
            for (r, (xr, gr)) in x.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                let mean = xr.iter().map(|&v| f(v)).sum::<f64>() / d as f64;
                let var = xr.iter().map(|&v| (f(v) - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let yhat: Vec<f64> = xr.iter().map(|&v| (f(v) - mean) * inv).collect();
                let mg = gr.iter().map(|&v| f(v)).sum::<f64>() / d as f64;
                let mgy = gr
                    .iter()
                    .zip(&yhat)
                    .map(|(&v, y)| f(v) * y)
                    .sum::<f64>()
                    / d as f64;
                for j in 0..d {
                    gx[r * d + j] = E::c(inv * (f(gr[j]) - mg - yhat[j] * mgy));
                }
            }
            acc(nodes, grads, *a, gx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        } => {
            let xs = val(*x);
            let (b, c) = (xs.shape()[0], xs.shape()[1]);
            let hw = numel(&xs.shape()[2..]);
            let xd = xs.data();
            let gm = val(*gamma).data();
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for k in 0..hw {
                        let gv = f(g[base + k]);
                        let xh = (f(xd[base + k]) - mean[ci]) * inv_std[ci];
                        dgamma[ci] += gv * xh;
                        dbeta[ci] += gv;
                    }
                }
            }
            if needs(nodes, *x) {
                let n = (b * hw) as f64;
                let mut gx = vec![E::zero(); xd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let gscale = f(gm[ci]) * inv_std[ci];
                        for k in 0..hw {
                            let gv = f(g[base + k]);
                            let v = if *batch_stats {
                                let xh = (f(xd[base + k]) - mean[ci]) * inv_std[ci];
                                gscale * (gv - dbeta[ci] / n - xh * dgamma[ci] / n)
                            } else {
                                gscale * gv
                            };
                            gx[base + k] = E::c(v);
                        }
                    }
                }
                acc(nodes, grads, *x, gx);
            }
            acc(nodes, grads, *gamma, dgamma.into_iter().map(E::c).collect());
            acc(nodes, grads, *beta, dbeta.into_iter().map(E::c).collect());
        }
        Op::Conv2d {
            x,
            w,
            b,
            pad,
            stride,
        } => conv_backward(nodes, id, *x, *w, *b, *pad, *stride, g, grads),
        Op::Concat(ids, axis) => {
            let out_shape = out.shape();
            let (outer, _, inner) = axis_split(out_shape, *axis);
            let total = out_shape[*axis];
            let mut start = 0;
            for &pid in ids {
                let n = val(pid).shape()[*axis];
                if needs(nodes, pid) {
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let s = (o * total + start) * inner;
                        gp.extend_from_slice(&g[s..s + n * inner]);
                    }
                    acc(nodes, grads, pid, gp);
                }
                start += n;
            }
        }
        Op::Narrow(a, axis, start) => {
            let in_shape = val(*a).shape();
            let (outer, n, inner) = axis_split(in_shape, *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![E::zero(); outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            acc(nodes, grads, *a, gx);
        }
        Op::IndexSelect(a, axis, idx) => {
            let (outer, n, inner) = axis_split(val(*a).shape(), *axis);
            let mut gx = vec![E::zero(); outer * n * inner];
            for o in 0..outer {
                for (j, &src) in idx.iter().enumerate() {
                    let from = (o * idx.len() + j) * inner;
                    let to = (o * n + src) * inner;
                    for i in 0..inner {
                        gx[to + i] += g[from + i];
                    }
                }
            }
            acc(nodes, grads, *a, gx);
        }
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, n) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (pa, pb) = (&a[..ra - 2], &b[..rb - 2]);
    let prefix = if pa == pb || pb.is_empty() {
        pa
    } else if pa.is_empty() {
        pb
    } else {
        return Err(Error::shape("matmul", a, b));
    };
    let mut out_shape = prefix.to_vec();
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatMulDims {
        batch: numel(prefix),
        m,
        k,
        n,
        a_batched: !pa.is_empty(),
        b_batched: !pb.is_empty(),
        out_shape,
    })
}

fn matmul_backward<E: Scalar>(
    nodes: &[Node<E>],
    a: usize,
    b: usize,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    let d = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    if needs(nodes, a) {
        let mut ga = vec![E::zero(); av.numel()];
        if !d.b_batched {
            E::gemm(d.batch * m, n, k, g, n as isize, 1, bv.data(), 1, n as isize, &mut ga, false);
        } else {
            for i in 0..d.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                let (dst, accum) = if d.a_batched {
                    (&mut ga[i * m * k..(i + 1) * m * k], false)
                } else {
                    (&mut ga[..], i > 0)
                };
                E::gemm(m, n, k, gi, n as isize, 1, bi, 1, n as isize, dst, accum);
            }
        }
        acc(nodes, grads, a, ga);
    }
    if needs(nodes, b) {
        let mut gb = vec![E::zero(); bv.numel()];
        if !d.b_batched {
            let rows = if d.a_batched { d.batch * m } else { m };
            if d.a_batched {
                E::gemm(k, rows, n, av.data(), 1, k as isize, g, n as isize, 1, &mut gb, false);
            } else {
                // a shared and b shared: only when batch == 1
                E::gemm(k, m, n, av.data(), 1, k as isize, g, n as isize, 1, &mut gb, false);
            }
        } else {
            for i in 0..d.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = if d.a_batched {
                    &av.data()[i * m * k..(i + 1) * m * k]
                } else {
                    av.data()
                };
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                E::gemm(k, m, n, ai, 1, k as isize, gi, n as isize, 1, dst, false);
            }
        }
        acc(nodes, grads, b, gb);
    }
}

fn conv_geom(x: &[usize], w: &[usize], pad: usize, stride: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
        return Err(Error::shape("conv2d", x, w));
    }
    let (h, wd) = (x[2], x[3]);
    let (kh, kw) = (w[2], w[3]);
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::shape("conv2d", x, w));
    }
    Ok(ConvGeom {
        c: x[1],
        h,
        w: wd,
        kh,
        kw,
        pad,
        stride,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<E: Scalar>(
    nodes: &[Node<E>],
    id: usize,
    x: usize,
    w: usize,
    b: Option<usize>,
    pad: usize,
    stride: usize,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let geom = conv_geom(xv.shape(), wv.shape(), pad, stride).expect("validated in forward");
    let batch = xv.shape()[0];
    let o = wv.shape()[0];
    let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
    let img = geom.c * geom.h * geom.w;
    let want_x = needs(nodes, x);
    let want_w = needs(nodes, w);
    let mut gw = vec![E::zero(); wv.numel()];
    let mut gx = vec![E::zero(); if want_x { xv.numel() } else { 0 }];
    let mut cols = vec![E::zero(); rows * cols_n];
    let mut dcols = vec![E::zero(); if want_x { rows * cols_n } else { 0 }];
    for bi in 0..batch {
        let gb = &g[bi * o * cols_n..(bi + 1) * o * cols_n];
        if want_w {
            im2col(&xv.data()[bi * img..(bi + 1) * img], &geom, &mut cols);
            E::gemm(o, cols_n, rows, gb, cols_n as isize, 1, &cols, 1, cols_n as isize, &mut gw, bi > 0);
        }
        if want_x {
            E::gemm(rows, o, cols_n, wv.data(), 1, rows as isize, gb, cols_n as isize, 1, &mut dcols, false);
            col2im(&dcols, &geom, &mut gx[bi * img..(bi + 1) * img]);
        }
    }
    let _ = id;
    if want_w {
        acc(nodes, grads, w, gw);
    }
    if want_x {
        acc(nodes, grads, x, gx);
    }
    if let Some(b) = b {
        if needs(nodes, b) {
            let mut gbias = vec![E::zero(); o];
            for bi in 0..batch {
                for oc in 0..o {
                    let s = (bi * o + oc) * cols_n;
                    gbias[oc] += g[s..s + cols_n].iter().copied().sum::<E>();
                }
            }
            acc(nodes, grads, b, gbias);
        }
    }
}

impl<'t, E: Scalar> Var<'t, E> {
    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with(self.id, |t| t.shape().to_vec())
    }

    pub fn value(&self) -> Tensor<E> {
        self.tape.with(self.id, Clone::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<E>) -> R) -> R {
        self.tape.with(self.id, f)
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.tape.with(self.id, |t| t.data().to_vec())
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> E {
        self.tape.with(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(self) -> Var<'t, E> {
        let v = self.value().with_requires_grad(false);
        self.tape.constant(v)
    }

    fn unary(self, op: Op, fwd: impl Fn(E) -> E) -> Var<'t, E> {
        let value = self.tape.with(self.id, |t| t.map(&fwd));
        self.tape.push(value, op, &[self.id])
    }

    fn binary_same(
        self,
        other: Var<'t, E>,
        name: &'static str,
        op: Op,
        fwd: impl Fn(E, E) -> E,
    ) -> Result<Var<'t, E>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| fwd(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary_same(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    fn suffix_check(&self, other: &Var<'t, E>, name: &'static str) -> Result<(Vec<usize>, usize)> {
        let (a, b) = (self.shape(), other.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
            return Err(Error::shape(name, &a, &b));
        }
        Ok((a, numel(&b)))
    }

    /// `self + other` with `other` repeated over the leading axes of `self`.
    pub fn add_suffix(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let (shape, n) = self.suffix_check(&other, "add_suffix")?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (nodes[self.id].value.data(), nodes[other.id].value.data());
            let data = a.iter().enumerate().map(|(i, &x)| x + b[i % n]).collect();
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(value, Op::AddSuffix(self.id, other.id), &[self.id, other.id]))
    }

    /// `self * other` with `other` repeated over the leading axes of `self`.
    pub fn mul_suffix(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let (shape, n) = self.suffix_check(&other, "mul_suffix")?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (nodes[self.id].value.data(), nodes[other.id].value.data());
            let data = a.iter().enumerate().map(|(i, &x)| x * b[i % n]).collect();
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(value, Op::MulSuffix(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t, E> {
        let k = E::c(c);
        self.unary(Op::Scale(self.id, c), move |x| x * k)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, E> {
        let k = E::c(c);
        self.unary(Op::AddScalar(self.id), move |x| x + k)
    }

    pub fn neg(self) -> Var<'t, E> {
        self.scale(-1.0)
    }

    pub fn log(self) -> Var<'t, E> {
        self.unary(Op::Log(self.id), Float::ln)
    }

    pub fn exp(self) -> Var<'t, E> {
        self.unary(Op::Exp(self.id), Float::exp)
    }

    pub fn square(self) -> Var<'t, E> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn relu(self) -> Var<'t, E> {
        self.unary(Op::Relu(self.id), |x| if x > E::zero() { x } else { E::zero() })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, E> {
        let s = E::c(slope);
        self.unary(Op::LeakyRelu(self.id, slope), move |x| {
            if x > E::zero() {
                x
            } else {
                x * s
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, E> {
        self.unary(Op::Gelu(self.id), |x| {
            let v = f(x);
            E::c(0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
        })
    }

    pub fn sigmoid(self) -> Var<'t, E> {
        self.unary(Op::Sigmoid(self.id), |x| {
            let v = f(x);
            E::c(if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            })
        })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, E> {
        let (l, h) = (E::c(lo), E::c(hi));
        self.unary(Op::Clamp(self.id, lo, hi), move |x| x.max(l).min(h))
    }

    pub fn sum(self) -> Var<'t, E> {
        let s = self.tape.with(self.id, |t| t.data().iter().map(|&x| f(x)).sum::<f64>());
        self.tape.push(Tensor::scalar(E::c(s)), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, E> {
        let s = self.tape.with(self.id, |t| {
            t.data().iter().map(|&x| f(x)).sum::<f64>() / t.numel().max(1) as f64
        });
        self.tape.push(Tensor::scalar(E::c(s)), Op::Mean(self.id), &[self.id])
    }

    fn check_axis(&self, axis: usize, name: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("{name}: axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, E>> {
        let shape = self.check_axis(axis, "reduce")?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let value = self.tape.with(self.id, |t| {
            let x = t.data();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..n).map(|j| f(x[(o * n + j) * inner + i])).sum();
                    out.push(E::c(if mean { s / n as f64 } else { s }));
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            Tensor::new(s, out)
        })?;
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        Ok(self.tape.push(value, op, &[self.id]))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, E>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, E>> {
        self.reduce_axis(axis, true)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t, E>> {
        let shape = self.check_axis(axis, "softmax")?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let value = self.tape.with(self.id, |t| {
            let x = t.data();
            let mut out = vec![E::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let max = (0..n)
                        .map(|j| f(x[base + j * inner]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..n).map(|j| (f(x[base + j * inner]) - max).exp()).sum();
                    let lz = z.ln();
                    for j in 0..n {
                        let k = base + j * inner;
                        let s = f(x[k]) - max;
                        out[k] = E::c(if log { s - lz } else { s.exp() / z });
                    }
                }
            }
            Tensor::new(shape.clone(), out)
        })?;
        let op = if log {
            Op::LogSoftmax(self.id, axis)
        } else {
            Op::Softmax(self.id, axis)
        };
        Ok(self.tape.push(value, op, &[self.id]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, E>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, E>> {
        self.softmax_impl(axis, true)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, E>> {
        let shape = shape.into();
        let value = self.tape.with(self.id, |t| t.clone().reshape(shape.clone()))?;
        let value = value.with_requires_grad(false);
        Ok(self.tape.push(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, E>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!("permute {axes:?} invalid for {shape:?}")));
        }
        let value = self.tape.with(self.id, |t| {
            let (s, d) = permute_data(t.data(), t.shape(), axes);
            Tensor::new(s, d)
        })?;
        Ok(self.tape.push(value, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    /// Swaps the two trailing axes.
    pub fn t(self) -> Result<Var<'t, E>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Batched matrix product; a rank-2 operand is shared across the other's batch.
    pub fn matmul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let d = matmul_dims(a.shape(), b.shape())?;
            let (m, k, n) = (d.m, d.k, d.n);
            let mut out = vec![E::zero(); d.batch * m * n];
            if !d.b_batched {
                let rows = if d.a_batched { d.batch * m } else { m };
                E::gemm(rows, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, false);
            } else {
                for i in 0..d.batch {
                    let ai = if d.a_batched {
                        &a.data()[i * m * k..(i + 1) * m * k]
                    } else {
                        a.data()
                    };
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    E::gemm(m, k, n, ai, k as isize, 1, bi, n as isize, 1, &mut out[i * m * n..(i + 1) * m * n], false);
                }
            }
            Tensor::new(d.out_shape, out)?
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Var<'t, E> {
        let value = self.tape.with(self.id, |t| {
            let d = *t.shape().last().unwrap_or(&1);
            let mut out = Vec::with_capacity(t.numel());
            for row in t.data().chunks_exact(d.max(1)) {
                let mean = row.iter().map(|&v| f(v)).sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (f(v) - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|&v| E::c((f(v) - mean) * inv)));
            }
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        });
        self.tape.push(value, Op::LayerNorm(self.id, eps), &[self.id])
    }

    /// Per-channel normalization of `[B,C,...]` followed by `gamma·x̂ + beta`.
    ///
    /// With `running = None` the batch's own statistics are used and returned;
    /// otherwise the supplied `(mean, var)` are applied.
    pub fn batch_norm(
        self,
        gamma: Var<'t, E>,
        beta: Var<'t, E>,
        running: Option<(&[E], &[E])>,
        eps: f64,
    ) -> Result<(Var<'t, E>, Option<BatchNormStats>)> {
        let shape = self.shape();
        if shape.len() < 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, &gamma.shape()));
        }
        let (b, c) = (shape[0], shape[1]);
        let hw = numel(&shape[2..]);
        let n = (b * hw) as f64;
        let nodes = self.tape.nodes.borrow();
        let x = nodes[self.id].value.data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => (
                rm.iter().map(|&v| f(v)).collect::<Vec<_>>(),
                rv.iter().map(|&v| f(v)).collect::<Vec<_>>(),
                None,
            ),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        s += x[base..base + hw].iter().map(|&v| f(v)).sum::<f64>();
                    }
                    mean[ci] = s / n;
                    let mut q = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        q += x[base..base + hw].iter().map(|&v| (f(v) - mean[ci]).powi(2)).sum::<f64>();
                    }
                    var[ci] = q / n;
                }
                let unbiased = var
                    .iter()
                    .map(|&v| if n > 1.0 { v * n / (n - 1.0) } else { v })
                    .collect();
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gm = nodes[gamma.id].value.data();
        let bt = nodes[beta.id].value.data();
        let mut out = vec![E::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (g, bb) = (f(gm[ci]), f(bt[ci]));
                for k in 0..hw {
                    out[base + k] = E::c(g * (f(x[base + k]) - mean[ci]) * inv_std[ci] + bb);
                }
            }
        }
        drop(nodes);
        let batch_stats = stats.is_some();
        let value = Tensor::new(shape, out)?;
        let var_out = self.tape.push(
            value,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                inv_std,
                batch_stats,
            },
            &[self.id, gamma.id, beta.id],
        );
        Ok((var_out, stats))
    }

    /// 2-D cross-correlation of `[B,C,H,W]` with `[O,C,kh,kw]`.
    pub fn conv2d(
        self,
        kernel: Var<'t, E>,
        bias: Option<Var<'t, E>>,
        padding: usize,
        stride: usize,
    ) -> Result<Var<'t, E>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[kernel.id].value);
            let geom = conv_geom(x.shape(), w.shape(), padding, stride)?;
            let o = w.shape()[0];
            if let Some(b) = bias {
                let bs = nodes[b.id].value.shape();
                if bs != [o] {
                    return Err(Error::shape("conv2d bias", bs, &[o]));
                }
            }
            let batch = x.shape()[0];
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let img = geom.c * geom.h * geom.w;
            let mut cols = vec![E::zero(); rows * cols_n];
            let mut out = vec![E::zero(); batch * o * cols_n];
            for bi in 0..batch {
                im2col(&x.data()[bi * img..(bi + 1) * img], &geom, &mut cols);
                let dst = &mut out[bi * o * cols_n..(bi + 1) * o * cols_n];
                E::gemm(o, rows, cols_n, w.data(), rows as isize, 1, &cols, cols_n as isize, 1, dst, false);
                if let Some(b) = bias {
                    let bd = nodes[b.id].value.data();
                    for oc in 0..o {
                        dst[oc * cols_n..(oc + 1) * cols_n].iter_mut().for_each(|v| *v += bd[oc]);
                    }
                }
            }
            Tensor::new(vec![batch, o, geom.oh, geom.ow], out)?
        };
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                pad: padding,
                stride,
            },
            &parents,
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape;
        let base = first.check_axis(axis, "concat")?;
        let value = {
            let nodes = tape.nodes.borrow();
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let ok = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&base, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let n = t.shape()[axis];
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(value, Op::Concat(ids.clone(), axis), &ids))
    }

    /// The slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let shape = self.check_axis(axis, "narrow")?;
        if start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let value = self.tape.with(self.id, |t| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * n + start) * inner;
                out.extend_from_slice(&t.data()[s..s + len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            Tensor::new(s, out)
        })?;
        Ok(self.tape.push(value, Op::Narrow(self.id, axis, start), &[self.id]))
    }

    /// Gathers the given positions along `axis` (repeats allowed).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t, E>> {
        let shape = self.check_axis(axis, "index_select")?;
        let (outer, n, inner) = axis_split(&shape, axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("index {bad} out of range for axis of size {n}")));
        }
        let value = self.tape.with(self.id, |t| {
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &j in indices {
                    let s = (o * n + j) * inner;
                    out.extend_from_slice(&t.data()[s..s + inner]);
                }
            }
            let mut s = shape.clone();
            s[axis] = indices.len();
            Tensor::new(s, out)
        })?;
        Ok(self
            .tape
            .push(value, Op::IndexSelect(self.id, axis, indices.to_vec()), &[self.id]))
    }
}

use num_traits::Float;
