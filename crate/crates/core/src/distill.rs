//! The cross-architecture objective: multi-view batches, the feature
//! discriminator, PCA + GL + adversarial terms mixed with cross-entropy, and
//! the soft-target (Hinton) baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::nn::{self, Bound, ParamMap};
use crate::projectors::{gl_forward, gl_loss, pca_forward, pca_loss, GlProjector, PcaProjector};
use crate::tensor::{bilinear_resize, permute_data, BatchNormStats, Scalar, Tensor, Var};

/// Sigmoid outputs are clamped to `[D_CLAMP, 1 − D_CLAMP]` before the logs.
pub const D_CLAMP: f64 = 1e-7;
pub const LEAKY_SLOPE: f64 = 0.01;

/// The original batch followed by `k − 1` augmented copies.
#[derive(Clone, Debug)]
pub struct ViewBatch<E: Scalar = f32> {
    pub views: Vec<Tensor<E>>,
}

/// Side of the square crop used for the extra views.
pub fn crop_side(h: usize, w: usize, crop_frac: f64) -> usize {
    (crop_frac * h.min(w) as f64).floor() as usize
}

/// Views `[x, crop₁(x), …]`: each extra view crops every image at a uniform
/// random position and resizes it back to the input size.
pub fn make_views<E: Scalar>(x: &Tensor<E>, k: usize, crop_frac: f64, rng: &mut impl Rng) -> Result<ViewBatch<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("make_views", s, &[0, 3, 0, 0]));
    }
    if k == 0 || !(crop_frac > 0.0 && crop_frac <= 1.0) {
        return Err(Error::invalid(format!("make_views needs k ≥ 1 and crop_frac in (0,1], got {k}, {crop_frac}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let side = crop_side(h, w, crop_frac);
    if side < 2 {
        return Err(Error::invalid(format!("crop side {side} is below 2 pixels")));
    }
    let mut views = vec![x.clone()];
    let plane = c * h * w;
    for _ in 1..k {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..b {
            let top = rng.gen_range(0..=h - side);
            let left = rng.gen_range(0..=w - side);
            let img = &x.data()[i * plane..(i + 1) * plane];
            let crop = Tensor::from_fn(vec![c, side, side], |j| {
                let (ch, r, col) = (j / (side * side), (j / side) % side, j % side);
                img[(ch * h + top + r) * w + left + col]
            });
            out.extend_from_slice(bilinear_resize(&crop, h, w)?.data());
        }
        views.push(Tensor::new(s.to_vec(), out)?);
    }
    Ok(ViewBatch { views })
}

/// Three-layer MLP with LeakyReLU and a sigmoid output.
#[derive(Clone, Debug)]
pub struct Discriminator<E: Scalar = f32> {
    pub input_dim: usize,
    pub hidden: usize,
    pub params: ParamMap<E>,
}

impl<E: Scalar> Discriminator<E> {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamMap::new();
        for (name, o, i) in [("fc1", hidden, input_dim), ("fc2", hidden, hidden), ("fc3", 1, hidden)] {
            let bound = 1.0 / (i as f64).sqrt();
            params.insert(
                format!("{name}.weight"),
                Tensor::from_fn(vec![o, i], |_| E::c(rng.gen_range(-bound..=bound))),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![o]));
        }
        Self {
            input_dim,
            hidden,
            params,
        }
    }
}

/// `D(x)` for `[B,F]` inputs, shape `[B,1]`.
pub fn discriminate<'t, E: Scalar>(p: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let h = nn::linear(p, "fc1", x)?.leaky_relu(LEAKY_SLOPE);
    let h = nn::linear(p, "fc2", h)?.leaky_relu(LEAKY_SLOPE);
    Ok(nn::linear(p, "fc3", h)?.sigmoid())
}

/// `(d_loss, g_loss)` from discriminator probabilities on teacher and student inputs.
pub fn adv_loss_from_probs<'t, E: Scalar>(d_t: Var<'t, E>, d_s: Var<'t, E>) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let hi = 1.0 - D_CLAMP;
    let d_t = d_t.clamp(D_CLAMP, hi);
    let d_s = d_s.clamp(D_CLAMP, hi);
    let real = d_t.log().mean();
    let fake = d_s.neg().add_scalar(1.0).log().mean();
    let d_loss = real.add(fake)?.neg();
    let g_loss = d_s.log().mean().neg();
    Ok((d_loss, g_loss))
}

/// Discriminator loss `−mean[log D(f_t) + log(1 − D(f_s))]` and the
/// non-saturating student loss `−mean log D(f_s)`.
pub fn adv_loss<'t, E: Scalar>(
    p: &Bound<'t, E>,
    ft_pooled: Var<'t, E>,
    fs_pooled: Var<'t, E>,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let (a, b) = (ft_pooled.shape(), fs_pooled.shape());
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(Error::shape("adv_loss", &a, &b));
    }
    adv_loss_from_probs(discriminate(p, ft_pooled)?, discriminate(p, fs_pooled)?)
}

/// Soft-target distillation:
/// `α·CE(y, σ(z_s/T)) + (1−α)·T²·KL(σ(z_t/T) ‖ σ(z_s/T))`, batch mean.
pub fn hinton_kd_loss<'t, E: Scalar>(
    zs: Var<'t, E>,
    zt: Var<'t, E>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<Var<'t, E>> {
    if !(temperature > 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("need T > 0 and α in [0,1], got T={temperature}, α={alpha}")));
    }
    let (a, b) = (zs.shape(), zt.shape());
    if a != b || a.len() != 2 {
        return Err(Error::shape("hinton_kd_loss", &a, &b));
    }
    let inv_t = 1.0 / temperature;
    let ce = nn::cross_entropy(zs.scale(inv_t), labels, None)?;
    let log_ps = zs.scale(inv_t).log_softmax(1)?;
    let log_pt = zt.scale(inv_t).log_softmax(1)?;
    let pt = zt.scale(inv_t).softmax(1)?;
    let kl = pt.mul(log_pt.sub(log_ps)?)?.sum().scale(1.0 / a[0] as f64);
    ce.scale(alpha).add(kl.scale((1.0 - alpha) * temperature * temperature))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

/// Per-step loss components. `total = α·ce + (1−α)·(kd_pca + λ1·kd_gl + λ2·kd_adv)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd_pca: f64,
    pub kd_gl: f64,
    pub kd_adv: f64,
    pub total: f64,
    pub weights: KdWeights,
}

impl LossBreakdown {
    pub fn kd_total(&self) -> f64 {
        self.kd_pca + self.weights.lambda1 * self.kd_gl + self.weights.lambda2 * self.kd_adv
    }

    /// The total recomputed from the components.
    pub fn reconstruct(&self) -> f64 {
        self.weights.alpha * self.ce + (1.0 - self.weights.alpha) * self.kd_total()
    }
}

/// Teacher signals for one view, already mapped onto the student grid.
#[derive(Clone, Debug)]
pub struct TeacherTargets<E: Scalar = f32> {
    /// Head-averaged last-block attention without CLS, `[B,S,S]` with `S = side²`.
    pub attention: Tensor<E>,
    /// Patch tokens as a `[B,D,side,side]` map.
    pub features: Tensor<E>,
    /// Spatial mean of `features`, `[B,D]`.
    pub pooled: Tensor<E>,
}

/// Resizes a `[B,N,N]` attention map over a `g×g` grid to `[B,S,S]` over a
/// `side×side` grid by bilinear resampling of both axes, then restores
/// row-stochasticity.
pub fn resize_attention<E: Scalar>(attn: &Tensor<E>, grid: usize, side: usize) -> Result<Tensor<E>> {
    let s = attn.shape();
    let n = grid * grid;
    if s.len() != 3 || s[1] != n || s[2] != n {
        return Err(Error::shape("resize_attention", s, &[0, n, n]));
    }
    let b = s[0];
    let sq = side * side;
    // key axis
    let keys = bilinear_resize(&attn.clone().reshape(vec![b, n, grid, grid])?, side, side)?;
    let (_, swapped) = permute_data(keys.data(), &[b, n, sq], &[0, 2, 1]);
    // query axis
    let queries = bilinear_resize(&Tensor::new(vec![b, sq, grid, grid], swapped)?, side, side)?;
    let (_, mut data) = permute_data(queries.data(), &[b, sq, sq], &[0, 2, 1]);
    for row in data.chunks_mut(sq) {
        let total = row.iter().fold(E::zero(), |a, &v| a + v.max(E::zero()));
        for v in row.iter_mut() {
            *v = v.max(E::zero()) / total;
        }
    }
    Tensor::new(vec![b, sq, sq], data)
}

/// Teacher forward without a gradient tape, mapped to a `side×side` student grid.
pub fn teacher_targets<E: Scalar>(teacher: &Model<E>, x: &Tensor<E>, side: usize) -> Result<TeacherTargets<E>> {
    let spec = &teacher.spec;
    let out = teacher.forward(x, true)?;
    let feats = out.features.ok_or_else(|| Error::invalid("teacher returned no features"))?;
    let attn = out.attention.ok_or_else(|| Error::invalid("teacher returned no attention"))?;
    let (g, n, d) = (spec.grid(), spec.num_patches(), spec.embed_dim);
    let b = x.shape()[0];
    let t = n + 1;

    let mut patch = Vec::with_capacity(b * n * d);
    for i in 0..b {
        patch.extend_from_slice(&feats.data()[(i * t + 1) * d..(i + 1) * t * d]);
    }
    let (_, chans) = permute_data(&patch, &[b, n, d], &[0, 2, 1]);
    let features = bilinear_resize(&Tensor::new(vec![b, d, g, g], chans)?, side, side)?;
    let sq = side * side;
    let pooled = Tensor::from_fn(vec![b, d], |i| {
        let s = &features.data()[i * sq..(i + 1) * sq];
        E::c(s.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / sq as f64)
    });

    let heads = spec.heads;
    let mut mean = vec![E::zero(); b * n * n];
    let inv = E::c(1.0 / heads as f64);
    for i in 0..b {
        for h in 0..heads {
            let base = (i * heads + h) * t * t;
            for r in 0..n {
                let src = &attn.data()[base + (r + 1) * t + 1..base + (r + 2) * t];
                let dst = &mut mean[(i * n + r) * n..(i * n + r + 1) * n];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
    }
    let attention = resize_attention(&Tensor::new(vec![b, n, n], mean)?, g, side)?;
    Ok(TeacherTargets {
        attention,
        features,
        pooled,
    })
}

/// Projector and discriminator parameters used by the distillation objective.
#[derive(Clone, Debug)]
pub struct KdModules<E: Scalar = f32> {
    pub pca: PcaProjector<E>,
    pub gl: GlProjector<E>,
    pub disc: Discriminator<E>,
}

/// Tape bindings for one step. The discriminator is normally bound frozen here.
pub struct KdBound<'t, E: Scalar = f32> {
    pub student: Bound<'t, E>,
    pub pca: Bound<'t, E>,
    pub gl: Bound<'t, E>,
    pub disc: Bound<'t, E>,
}

/// Tape outputs of [`distill_loss`].
pub struct KdTerms<'t, E: Scalar = f32> {
    pub pca: Var<'t, E>,
    pub gl: Var<'t, E>,
    pub adv: Var<'t, E>,
    /// `pca + λ1·gl + λ2·adv`.
    pub kd_total: Var<'t, E>,
    /// Student logits on the original view.
    pub logits: Var<'t, E>,
    /// Batch statistics from the original view only.
    pub bn_stats: Vec<(String, BatchNormStats)>,
    /// Detached discriminator inputs per view: (teacher, student).
    pub pooled: Vec<(Tensor<E>, Tensor<E>)>,
}

fn spatial_mean<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let s = x.shape();
    x.reshape(vec![s[0], s[1], s[2] * s[3]])?.mean_axis(2)
}

/// Averages the PCA, GL and adversarial terms over all views. Teacher
/// signals come from tape-free inference, so no teacher gradient exists.
pub fn distill_loss<'t, E: Scalar>(
    teacher: &Model<E>,
    student: &Model<E>,
    kd: &KdModules<E>,
    b: &KdBound<'t, E>,
    views: &ViewBatch<E>,
    weights: &KdWeights,
) -> Result<KdTerms<'t, E>> {
    if views.views.is_empty() {
        return Err(Error::invalid("empty view batch"));
    }
    let tape = b.student.get("head.weight")?.tape();
    let side = student.spec.feature_side();
    let mut pca_terms = Vec::new();
    let mut gl_terms = Vec::new();
    let mut adv_terms = Vec::new();
    let mut pooled = Vec::new();
    let mut logits = None;
    let mut bn_stats = Vec::new();
    for (i, view) in views.views.iter().enumerate() {
        let s = view.shape();
        let want = [s.first().copied().unwrap_or(0), 3, student.spec.image_size, student.spec.image_size];
        if s != want || teacher.spec.image_size != student.spec.image_size {
            return Err(Error::shape("distill view", s, &want));
        }
        let tt = teacher_targets(teacher, view, side)?;
        let out = student.forward_tape(&b.student, tape.constant(view.clone()), Mode::Train, true)?;
        let fs = out.features.ok_or_else(|| Error::invalid("student returned no features"))?;
        let ft = tape.constant(tt.features);
        let (a_s, _) = pca_forward(&kd.pca.cfg, &b.pca, fs, Some(ft))?;
        pca_terms.push(pca_loss(tape.constant(tt.attention), a_s)?);
        let projected = gl_forward(&kd.gl.cfg, &b.gl, fs)?;
        gl_terms.push(gl_loss(projected, ft)?);
        let fs_pooled = spatial_mean(projected)?;
        let ft_pooled = tape.constant(tt.pooled.clone());
        let (_, g_loss) = adv_loss(&b.disc, ft_pooled, fs_pooled)?;
        adv_terms.push(g_loss);
        pooled.push((tt.pooled, fs_pooled.value()));
        if i == 0 {
            logits = Some(out.logits);
            bn_stats = out.bn_stats;
        }
    }
    let avg = |terms: Vec<Var<'t, E>>| -> Result<Var<'t, E>> {
        let n = terms.len();
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = acc.add(*t)?;
        }
        Ok(if n > 1 { acc.scale(1.0 / n as f64) } else { acc })
    };
    let pca = avg(pca_terms)?;
    let gl = avg(gl_terms)?;
    let adv = avg(adv_terms)?;
    let kd_total = pca.add(gl.scale(weights.lambda1))?.add(adv.scale(weights.lambda2))?;
    Ok(KdTerms {
        pca,
        gl,
        adv,
        kd_total,
        logits: logits.expect("at least one view"),
        bn_stats,
        pooled,
    })
}

/// `α·ce + (1−α)·kd_total` on the tape, with the matching breakdown.
pub fn combine<'t, E: Scalar>(
    ce: Var<'t, E>,
    terms: &KdTerms<'t, E>,
    weights: &KdWeights,
) -> Result<(Var<'t, E>, LossBreakdown)> {
    let total = ce.scale(weights.alpha).add(terms.kd_total.scale(1.0 - weights.alpha))?;
    let f = |v: Var<'t, E>| v.item().to_f64().unwrap_or(f64::NAN);
    let lb = LossBreakdown {
        ce: f(ce),
        kd_pca: f(terms.pca),
        kd_gl: f(terms.gl),
        kd_adv: f(terms.adv),
        total: f(total),
        weights: *weights,
    };
    Ok((total, lb))
}
