//! Bridges from CNN feature maps to the teacher's spaces: the partially
//! cross-attention (PCA) projector and the group-wise linear (GL) projector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamMap};
use crate::tensor::{Scalar, Tensor, Var};

/// Floor applied inside the logarithms of the attention KL.
pub const KL_FLOOR: f64 = 1e-8;
/// How far a row of an attention map may stray from summing to one.
pub const ROW_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaConfig {
    /// Student feature channels.
    pub channels: usize,
    pub dk: usize,
    /// 1 or 3; a 3×3 kernel is zero-padded to keep the grid.
    pub kernel_size: usize,
    /// Teacher embedding width when queries come from the teacher.
    pub cross_dim: Option<usize>,
}

impl PcaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            dk: channels,
            kernel_size: 1,
            cross_dim: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PcaProjector<E: Scalar = f32> {
    pub cfg: PcaConfig,
    pub params: ParamMap<E>,
}

fn conv_param<E: Scalar>(
    params: &mut ParamMap<E>,
    rng: &mut impl Rng,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
) {
    let fan_in = inp * k * k;
    params.insert(format!("{name}.weight"), nn::kaiming_uniform(rng, &[out, inp, k, k], fan_in));
    params.insert(format!("{name}.bias"), Tensor::zeros(vec![out]));
}

fn conv<'t, E: Scalar>(p: &Bound<'t, E>, name: &str, x: Var<'t, E>, k: usize) -> Result<Var<'t, E>> {
    x.conv2d(
        p.get(&format!("{name}.weight"))?,
        Some(p.get(&format!("{name}.bias"))?),
        k / 2,
        1,
    )
}

impl<E: Scalar> PcaProjector<E> {
    pub fn new(cfg: PcaConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels == 0 || cfg.dk == 0 || !matches!(cfg.kernel_size, 1 | 3) {
            return Err(Error::invalid(format!(
                "pca projector needs channels, dk > 0 and kernel 1 or 3, got {cfg:?}"
            )));
        }
        let (c, k) = (cfg.channels, cfg.kernel_size);
        let mut params = ParamMap::new();
        conv_param(&mut params, rng, "q", cfg.dk, c, k);
        conv_param(&mut params, rng, "k", cfg.dk, c, k);
        conv_param(&mut params, rng, "v", c, c, k);
        if let Some(d) = cfg.cross_dim {
            conv_param(&mut params, rng, "tq", cfg.dk, d, 1);
        }
        Ok(Self { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }
}

/// `[B,C,H,W] → [B,HW,C]`.
pub fn to_tokens<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let s = x.shape();
    x.reshape(vec![s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Student attention `softmax(QᵀK/√dk)` of shape `[B,HW,HW]` and the
/// attention-weighted values reshaped back to `[B,C,H,W]`.
///
/// In cross mode `teacher` must hold the teacher's features resized to the
/// student grid, `[B,D,H,W]`; queries are then projected from it.
pub fn pca_forward<'t, E: Scalar>(
    cfg: &PcaConfig,
    p: &Bound<'t, E>,
    fs: Var<'t, E>,
    teacher: Option<Var<'t, E>>,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let s = fs.shape();
    if s.len() != 4 || s[1] != cfg.channels {
        return Err(Error::shape("pca_forward", &s, &[0, cfg.channels, 0, 0]));
    }
    if s[2] * s[3] < 2 {
        return Err(Error::invalid("pca_forward needs at least two spatial positions"));
    }
    let k = cfg.kernel_size;
    let q = match (cfg.cross_dim, teacher) {
        (Some(_), Some(ft)) => conv(p, "tq", ft, 1)?,
        (Some(_), None) => return Err(Error::invalid("cross-mode pca needs teacher features")),
        (None, _) => conv(p, "q", fs, k)?,
    };
    let q = to_tokens(q)?;
    let kk = conv(p, "k", fs, k)?;
    let ks = kk.shape();
    let kk = kk.reshape(vec![ks[0], ks[1], ks[2] * ks[3]])?;
    let attn = q.matmul(kk)?.scale(1.0 / (cfg.dk as f64).sqrt()).softmax(2)?;
    let v = to_tokens(conv(p, "v", fs, k)?)?;
    let ctx = attn
        .matmul(v)?
        .permute(&[0, 2, 1])?
        .reshape(s.clone())?;
    Ok((attn, ctx))
}

fn check_rows<E: Scalar>(name: &str, t: &Tensor<E>) -> Result<()> {
    let n = *t.shape().last().unwrap_or(&1);
    for (r, row) in t.data().chunks(n.max(1)).enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        if !((s - 1.0).abs() <= ROW_TOL) {
            return Err(Error::invalid(format!(
                "{name} row {r} sums to {s}, attention maps must be row-stochastic"
            )));
        }
    }
    Ok(())
}

/// Mean over batch and rows of `KL(a_t ‖ a_s)` for `[B,N,N]` attention maps.
pub fn pca_loss<'t, E: Scalar>(a_t: Var<'t, E>, a_s: Var<'t, E>) -> Result<Var<'t, E>> {
    let (st, ss) = (a_t.shape(), a_s.shape());
    if st != ss || st.len() != 3 {
        return Err(Error::shape("pca_loss", &st, &ss));
    }
    a_t.with_value(|t| check_rows("teacher attention", t))?;
    a_s.with_value(|t| check_rows("student attention", t))?;
    let log_t = a_t.clamp(KL_FLOOR, f64::INFINITY).log();
    let log_s = a_s.clamp(KL_FLOOR, f64::INFINITY).log();
    let kl = a_t.mul(log_t.sub(log_s)?)?.sum();
    Ok(kl.scale(1.0 / (st[0] * st[1]) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlConfig {
    /// Student feature channels.
    pub channels: usize,
    /// Teacher embedding width.
    pub dim: usize,
    pub groups: usize,
}

impl GlConfig {
    pub fn padded_channels(&self) -> usize {
        self.channels.div_ceil(self.groups) * self.groups
    }

    pub fn pad_channels(&self) -> usize {
        self.padded_channels() - self.channels
    }

    /// Parameters of the grouped map.
    pub fn param_count(&self) -> usize {
        let (ci, co) = (self.padded_channels() / self.groups, self.dim / self.groups);
        self.groups * (ci * co + co)
    }

    /// Parameters of an ungrouped `C → D` map with bias.
    pub fn full_param_count(&self) -> usize {
        self.channels * self.dim + self.dim
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.dim == 0 || self.dim % self.groups != 0 {
            return Err(Error::invalid(format!(
                "gl projector needs groups dividing the teacher width, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GlProjector<E: Scalar = f32> {
    pub cfg: GlConfig,
    pub params: ParamMap<E>,
}

impl<E: Scalar> GlProjector<E> {
    pub fn new(cfg: GlConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let ci = cfg.padded_channels() / cfg.groups;
        let co = cfg.dim / cfg.groups;
        let mut params = ParamMap::new();
        for g in 0..cfg.groups {
            conv_param(&mut params, rng, &format!("groups.{g}"), co, ci, 1);
        }
        Ok(Self { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }
}

/// Zero-pads channels to a multiple of `groups`, maps each group with its own
/// 1×1 convolution, and concatenates the results: `[B,C,H,W] → [B,D,H,W]`.
pub fn gl_forward<'t, E: Scalar>(cfg: &GlConfig, p: &Bound<'t, E>, fs: Var<'t, E>) -> Result<Var<'t, E>> {
    cfg.validate()?;
    let s = fs.shape();
    if s.len() != 4 || s[1] != cfg.channels {
        return Err(Error::shape("gl_forward", &s, &[0, cfg.channels, 0, 0]));
    }
    let pad = cfg.pad_channels();
    let x = if pad > 0 {
        let zeros = fs.tape().constant(Tensor::zeros(vec![s[0], pad, s[2], s[3]]));
        Var::concat(&[fs, zeros], 1)?
    } else {
        fs
    };
    let ci = cfg.padded_channels() / cfg.groups;
    let parts = (0..cfg.groups)
        .map(|g| conv(p, &format!("groups.{g}"), x.narrow(1, g * ci, ci)?, 1))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    Var::concat(&parts, 1)
}

/// Mean squared difference.
pub fn gl_loss<'t, E: Scalar>(projected: Var<'t, E>, ft: Var<'t, E>) -> Result<Var<'t, E>> {
    let (a, b) = (projected.shape(), ft.shape());
    if a != b {
        return Err(Error::shape("gl_loss", &a, &b));
    }
    Ok(projected.sub(ft)?.square().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tape;

    fn bound<'t>(tape: &'t Tape<f64>, params: &ParamMap<f64>) -> Bound<'t, f64> {
        Bound::frozen(tape, params)
    }

    #[test]
    fn constant_features_give_uniform_attention() {
        let cfg = PcaConfig::new(3);
        let pca = PcaProjector::<f64>::new(cfg.clone(), &mut rng::stream(1, "t")).unwrap();
        let tape = Tape::new();
        let p = bound(&tape, &pca.params);
        let fs = tape.constant(Tensor::full(vec![2, 3, 3, 3], 0.7));
        let (a, ctx) = pca_forward(&cfg, &p, fs, None).unwrap();
        assert_eq!(a.shape(), vec![2, 9, 9]);
        assert_eq!(ctx.shape(), vec![2, 3, 3, 3]);
        assert!(a.to_vec().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-12));
    }

    #[test]
    fn reference_shape_contract() {
        let cfg = PcaConfig::new(8);
        let pca = PcaProjector::<f64>::new(cfg.clone(), &mut rng::stream(1, "t")).unwrap();
        let tape = Tape::new();
        let p = bound(&tape, &pca.params);
        let mut r = rng::stream(2, "x");
        let fs = tape.constant(Tensor::from_fn(vec![2, 8, 4, 4], |_| r.gen_range(-1.0..1.0)));
        let (a, ctx) = pca_forward(&cfg, &p, fs, None).unwrap();
        assert_eq!(a.shape(), vec![2, 16, 16]);
        assert_eq!(ctx.shape(), vec![2, 8, 4, 4]);
        for row in a.to_vec().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn three_by_three_kernel_keeps_grid() {
        let cfg = PcaConfig {
            kernel_size: 3,
            ..PcaConfig::new(4)
        };
        let pca = PcaProjector::<f64>::new(cfg.clone(), &mut rng::stream(1, "t")).unwrap();
        let tape = Tape::new();
        let p = bound(&tape, &pca.params);
        let fs = tape.constant(Tensor::from_fn(vec![1, 4, 3, 3], |i| i as f64 * 0.01));
        let (a, ctx) = pca_forward(&cfg, &p, fs, None).unwrap();
        assert_eq!(a.shape(), vec![1, 9, 9]);
        assert_eq!(ctx.shape(), vec![1, 4, 3, 3]);
    }

    #[test]
    fn pca_loss_closed_forms() {
        let tape = Tape::<f64>::new();
        let at = tape.constant(Tensor::from_f64(vec![1, 1, 2], &[0.7, 0.3]).unwrap());
        let as_ = tape.constant(Tensor::from_f64(vec![1, 1, 2], &[0.5, 0.5]).unwrap());
        let l = pca_loss(at, as_).unwrap().item();
        assert!((l - (0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln())).abs() < 1e-12);
        let one_hot = tape.constant(Tensor::from_f64(vec![1, 1, 4], &[1., 0., 0., 0.]).unwrap());
        let uni = tape.constant(Tensor::full(vec![1, 1, 4], 0.25));
        assert!((pca_loss(one_hot, uni).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(pca_loss(uni, uni).unwrap().item(), 0.0);
    }

    #[test]
    fn pca_loss_rejects_unnormalized_rows() {
        let tape = Tape::<f64>::new();
        let bad = tape.constant(Tensor::from_f64(vec![1, 1, 2], &[0.7, 0.7]).unwrap());
        let ok = tape.constant(Tensor::from_f64(vec![1, 1, 2], &[0.5, 0.5]).unwrap());
        assert!(pca_loss(bad, ok).is_err());
        assert!(pca_loss(ok, bad).is_err());
    }

    #[test]
    fn gl_padding_layout() {
        let cfg = GlConfig {
            channels: 5,
            dim: 4,
            groups: 2,
        };
        assert_eq!(cfg.padded_channels(), 6);
        let gl = GlProjector::<f64>::new(cfg.clone(), &mut rng::stream(1, "t")).unwrap();
        assert_eq!(gl.params["groups.0.weight"].shape(), &[2, 3, 1, 1]);
        assert_eq!(gl.param_count(), cfg.param_count());
        assert!(cfg.param_count() < cfg.full_param_count());
        let tape = Tape::new();
        let p = bound(&tape, &gl.params);
        let out = gl_forward(&cfg, &p, tape.constant(Tensor::ones(vec![1, 5, 2, 2]))).unwrap();
        assert_eq!(out.shape(), vec![1, 4, 2, 2]);
    }

    #[test]
    fn gl_identity_single_group() {
        let cfg = GlConfig {
            channels: 3,
            dim: 3,
            groups: 1,
        };
        let mut params = ParamMap::new();
        let eye = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        params.insert("groups.0.weight".into(), eye);
        params.insert("groups.0.bias".into(), Tensor::zeros(vec![3]));
        let tape = Tape::<f64>::new();
        let p = bound(&tape, &params);
        let x = Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64 - 5.0);
        let out = gl_forward(&cfg, &p, tape.constant(x.clone())).unwrap();
        assert_eq!(out.to_vec(), x.data());
    }

    #[test]
    fn gl_loss_closed_forms() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64);
        let va = tape.constant(a.clone());
        assert_eq!(gl_loss(va, va).unwrap().item(), 0.0);
        let vb = tape.constant(a.map(|x| x + 1.0));
        assert!((gl_loss(vb, va).unwrap().item() - 1.0).abs() < 1e-12);
        let vc = tape.constant(Tensor::zeros(vec![1, 2, 2, 1]));
        assert!(gl_loss(va, vc).is_err());
    }
}
