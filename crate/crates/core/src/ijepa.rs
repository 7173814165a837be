//! Latent masked prediction for the teacher: block masks over the patch grid,
//! an EMA target encoder, and a small transformer predictor.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{sincos_2d, vit, ArchSpec, Model};
use crate::nn::{self, Bound, ParamMap};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::{cosine_lr, AdamW, Group, HistoryRow, Schedule};

pub const MIN_RATIO: f64 = 0.6;
pub const MAX_RATIO: f64 = 0.75;
pub const MIN_ASPECT: f64 = 0.75;
pub const MAX_ASPECT: f64 = 1.5;
const MAX_ATTEMPTS: usize = 2000;

/// Context patches and rectangular target blocks over a `rows×cols` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid: (usize, usize),
    pub context: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn masked(&self) -> BTreeSet<usize> {
        self.targets.iter().flatten().copied().collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked().len() as f64 / self.num_patches() as f64
    }

    /// Checks disjointness, coverage and block shape.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_patches();
        let masked = self.masked();
        if self.context.iter().any(|c| masked.contains(c) || *c >= n) {
            return Err(Error::invalid("context overlaps a target block"));
        }
        if masked.len() + self.context.len() != n {
            return Err(Error::invalid("context and targets do not partition the grid"));
        }
        let f = self.masked_fraction();
        if !(MIN_RATIO..=MAX_RATIO).contains(&f) {
            return Err(Error::invalid(format!("masked fraction {f} outside [0.6, 0.75]")));
        }
        let cols = self.grid.1;
        for t in &self.targets {
            let (r0, r1) = (t.iter().map(|i| i / cols).min(), t.iter().map(|i| i / cols).max());
            let (c0, c1) = (t.iter().map(|i| i % cols).min(), t.iter().map(|i| i % cols).max());
            match (r0, r1, c0, c1) {
                (Some(r0), Some(r1), Some(c0), Some(c1)) if (r1 - r0 + 1) * (c1 - c0 + 1) == t.len() => {}
                _ => return Err(Error::invalid("target block is not a rectangle")),
            }
        }
        Ok(())
    }
}

/// Number of patches to mask for `ratio` on an `n`-patch grid.
pub fn target_count(n: usize, ratio: f64) -> usize {
    let lo = (MIN_RATIO * n as f64).ceil() as usize;
    let hi = (MAX_RATIO * n as f64).floor() as usize;
    ((ratio * n as f64).round() as usize).clamp(lo, hi.max(lo))
}

type Rect = (usize, usize, usize, usize);

fn sample_rect(rng: &mut impl Rng, grid: (usize, usize), area: f64) -> Rect {
    let (rows, cols) = grid;
    let aspect = rng.gen_range(MIN_ASPECT..=MAX_ASPECT);
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
    let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
    let top = rng.gen_range(0..=rows - h);
    let left = rng.gen_range(0..=cols - w);
    (top, left, h, w)
}

fn rect_cells((top, left, h, w): Rect, cols: usize) -> Vec<usize> {
    (top..top + h)
        .flat_map(|r| (left..left + w).map(move |c| r * cols + c))
        .collect()
}

/// Samples `n_blocks` rectangles (possibly overlapping each other) whose union
/// masks `round(ratio·N)` patches, clamped to the allowed range. Block areas
/// and aspect ratios are drawn at random and the draw is repeated until the
/// count is hit; failing that, the closest draw within one grid row of the
/// target is accepted.
pub fn sample_mask(grid: (usize, usize), ratio: f64, n_blocks: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(MIN_RATIO..=MAX_RATIO).contains(&ratio) || n_blocks == 0 {
        return Err(Error::invalid(format!(
            "mask ratio must be in [0.6, 0.75] with at least one block, got {ratio}, {n_blocks}"
        )));
    }
    let (rows, cols) = grid;
    let n = rows * cols;
    let lo = (MIN_RATIO * n as f64).ceil() as usize;
    let hi = (MAX_RATIO * n as f64).floor() as usize;
    if n < 2 || lo > hi {
        return Err(Error::invalid(format!("grid {rows}×{cols} cannot be masked at {ratio}")));
    }
    let want = target_count(n, ratio);
    let mut best: Option<(usize, Vec<Rect>)> = None;
    for _ in 0..MAX_ATTEMPTS {
        let scale = rng.gen_range(1.0..=2.0);
        let area = scale * want as f64 / n_blocks as f64;
        let rects: Vec<Rect> = (0..n_blocks).map(|_| sample_rect(rng, grid, area)).collect();
        let union: BTreeSet<usize> = rects.iter().flat_map(|&r| rect_cells(r, cols)).collect();
        let diff = union.len().abs_diff(want);
        if (lo..=hi).contains(&union.len()) && best.as_ref().map_or(true, |(d, _)| diff < *d) {
            best = Some((diff, rects));
            if diff == 0 {
                break;
            }
        }
    }
    match best {
        Some((diff, rects)) if diff <= cols => {
            let targets: Vec<Vec<usize>> = rects.iter().map(|&r| rect_cells(r, cols)).collect();
            let masked: BTreeSet<usize> = targets.iter().flatten().copied().collect();
            let context = (0..n).filter(|i| !masked.contains(i)).collect();
            Ok(MaskPlan {
                grid,
                context,
                targets,
            })
        }
        _ => Err(Error::invalid(format!(
            "could not place {n_blocks} rectangles covering {want} of {n} patches"
        ))),
    }
}

/// Exponential moving average of the context encoder.
#[derive(Clone, Debug)]
pub struct EmaState<E: Scalar = f32> {
    pub momentum: f64,
    pub target: ParamMap<E>,
}

impl<E: Scalar> EmaState<E> {
    pub fn new(momentum: f64, context: &ParamMap<E>) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("ema momentum {momentum} outside [0,1]")));
        }
        Ok(Self {
            momentum,
            target: context.clone(),
        })
    }
}

/// `target ← m·target + (1−m)·context` for every parameter.
pub fn ema_update<E: Scalar>(state: &mut EmaState<E>, context: &ParamMap<E>) -> Result<()> {
    if state.target.len() != context.len() {
        return Err(Error::invalid("ema target and context encoder differ in parameter set"));
    }
    let m = E::c(state.momentum);
    let one_m = E::c(1.0 - state.momentum);
    for (name, t) in state.target.iter_mut() {
        let c = context
            .get(name)
            .ok_or_else(|| Error::invalid(format!("context encoder lacks `{name}`")))?;
        if c.shape() != t.shape() {
            return Err(Error::shape("ema_update", t.shape(), c.shape()));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(c.data()) {
            *a = m * *a + one_m * b;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Width of the encoder being predicted.
    pub embed_dim: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub grid: usize,
}

impl PredictorConfig {
    /// A predictor half the encoder's width with two blocks.
    pub fn for_encoder(spec: &ArchSpec) -> Self {
        let dim = (spec.embed_dim / 2).max(spec.heads);
        Self {
            embed_dim: spec.embed_dim,
            dim: dim - dim % spec.heads.max(1),
            depth: 2,
            heads: spec.heads,
            mlp_ratio: spec.mlp_ratio,
            grid: spec.grid(),
        }
    }
}

/// Maps context tokens plus positioned mask tokens to predicted target tokens.
#[derive(Clone, Debug)]
pub struct Predictor<E: Scalar = f32> {
    pub cfg: PredictorConfig,
    pub params: ParamMap<E>,
    pos: Tensor<E>,
}

impl<E: Scalar> Predictor<E> {
    pub fn new(cfg: PredictorConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::invalid(format!("predictor width must split into heads, got {cfg:?}")));
        }
        let (d, e) = (cfg.dim, cfg.embed_dim);
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        let mut params = ParamMap::new();
        let mut lin = |name: &str, o: usize, i: usize, params: &mut ParamMap<E>| {
            params.insert(format!("{name}.weight"), nn::trunc_normal(rng, &[o, i], 0.02));
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![o]));
        };
        lin("embed", d, e, &mut params);
        for b in 0..cfg.depth {
            let p = format!("blocks.{b}");
            lin(&format!("{p}.attn.qkv"), 3 * d, d, &mut params);
            lin(&format!("{p}.attn.proj"), d, d, &mut params);
            lin(&format!("{p}.mlp.fc1"), hidden, d, &mut params);
            lin(&format!("{p}.mlp.fc2"), d, hidden, &mut params);
        }
        lin("proj", e, d, &mut params);
        let mut norms: Vec<String> = (0..cfg.depth)
            .flat_map(|b| [format!("blocks.{b}.norm1"), format!("blocks.{b}.norm2")])
            .collect();
        norms.push("norm".into());
        for n in norms {
            params.insert(format!("{n}.weight"), Tensor::ones(vec![d]));
            params.insert(format!("{n}.bias"), Tensor::zeros(vec![d]));
        }
        params.insert("mask_token".into(), nn::trunc_normal(rng, &[1, 1, d], 0.02));
        let pos = sincos_2d(cfg.grid, d);
        Ok(Self { cfg, params, pos })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }

    /// Predicts `[B,|target|,embed_dim]` from context tokens `[B,|context|,embed_dim]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, E>,
        context_tokens: Var<'t, E>,
        context: &[usize],
        target: &[usize],
    ) -> Result<Var<'t, E>> {
        let tape = context_tokens.tape();
        let s = context_tokens.shape();
        let (b, d) = (s[0], self.cfg.dim);
        let pos = tape.constant(self.pos.clone());
        let ctx = nn::linear(p, "embed", context_tokens)?.add_suffix(pos.index_select(0, context)?)?;
        let m = target.len();
        let mask = Var::concat(&vec![p.get("mask_token")?; m], 1)?
            .reshape(vec![m, d])?
            .add(pos.index_select(0, target)?)?
            .reshape(vec![1, m, d])?;
        let mask = Var::concat(&vec![mask; b], 0)?;
        let mut h = Var::concat(&[ctx, mask], 1)?;
        for i in 0..self.cfg.depth {
            h = vit::block(p, &format!("blocks.{i}"), h, self.cfg.heads)?.0;
        }
        let h = nn::layer_norm(p, "norm", h)?.narrow(1, context.len(), m)?;
        nn::linear(p, "proj", h)
    }
}

/// `(1/B)·Σ_blocks Σ_tokens ‖pred − target‖²` over `[B,M,D]` pairs.
pub fn latent_prediction_loss<'t, E: Scalar>(pairs: &[(Var<'t, E>, Var<'t, E>)]) -> Result<Var<'t, E>> {
    let (first, _) = pairs.first().ok_or_else(|| Error::invalid("no target blocks"))?;
    let b = first.shape()[0];
    let mut acc: Option<Var<'t, E>> = None;
    for (pred, tgt) in pairs {
        if pred.shape() != tgt.shape() {
            return Err(Error::shape("latent_prediction_loss", &pred.shape(), &tgt.shape()));
        }
        let term = pred.sub(*tgt)?.square().sum();
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty").scale(1.0 / b as f64))
}

/// Encodes the context patches with the online encoder and all patches with
/// the EMA target (no gradient), predicts each target block, and sums the
/// squared errors.
pub fn ijepa_loss<'t, E: Scalar>(
    spec: &ArchSpec,
    encoder: &Bound<'t, E>,
    target: &EmaState<E>,
    predictor: &Predictor<E>,
    pred_params: &Bound<'t, E>,
    image: Var<'t, E>,
    plan: &MaskPlan,
) -> Result<Var<'t, E>> {
    let g = spec.grid();
    if plan.grid != (g, g) {
        return Err(Error::invalid(format!("mask plan grid {:?} does not match {g}×{g}", plan.grid)));
    }
    let tape = image.tape();
    let targets = {
        let frozen = Bound::frozen(tape, &target.target);
        let full = vit::encode_patches(spec, &frozen, image.detach(), None)?;
        tape.constant(full.value())
    };
    let ctx = vit::encode_patches(spec, encoder, image, Some(&plan.context))?;
    let pairs = plan
        .targets
        .iter()
        .map(|blk| {
            let pred = predictor.forward(pred_params, ctx, &plan.context, blk)?;
            Ok((pred, targets.index_select(1, blk)?))
        })
        .collect::<Result<Vec<_>>>()?;
    latent_prediction_loss(&pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IjepaConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min_ratio: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub mask_ratio: f64,
    pub n_blocks: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for IjepaConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_min_ratio: 0.01,
            weight_decay: 0.05,
            momentum: 0.996,
            mask_ratio: 0.65,
            n_blocks: 4,
            seed: 0,
        }
    }
}

/// Pretraining result; the encoder itself is updated in place.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub ema: EmaState,
    pub predictor: Predictor,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub history: Vec<HistoryRow>,
}

/// Self-supervised training of a ViT encoder by latent masked prediction.
pub fn pretrain(model: &mut Model, data: &Dataset, cfg: &IjepaConfig) -> Result<PretrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("invalid pretraining config {cfg:?}")));
    }
    if data.is_empty() {
        return Err(Error::Dataset("pretraining set is empty".into()));
    }
    let spec = model.spec.clone();
    let g = spec.grid();
    let mut predictor = Predictor::new(PredictorConfig::for_encoder(&spec), &mut rng::stream(cfg.seed, "init/pred"))?;
    let mut ema = EmaState::new(cfg.momentum, &model.params)?;
    let policy = AugmentPolicy::uniform(AugmentConfig::ssl(spec.image_size));
    let total = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let sched = Schedule {
        lr_min: cfg.lr * cfg.lr_min_ratio,
        lr_max: cfg.lr,
        total_steps: total,
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = data.batches(epoch, cfg.batch_size, true, &policy, cfg.seed)?;
        let n = batches.len();
        for batch in batches {
            let lr = cosine_lr(step, &sched);
            let plan = sample_mask((g, g), cfg.mask_ratio, cfg.n_blocks, &mut rng::substream(cfg.seed, "masks", step as u64))?;
            let tape = Tape::new();
            let enc = Bound::bind(&tape, &model.params, Model::<f32>::is_trainable);
            let pp = Bound::bind(&tape, &predictor.params, |_| true);
            let loss = ijepa_loss(&spec, &enc, &ema, &predictor, &pp, tape.constant(batch.x), &plan)?;
            let value = f64::from(loss.item());
            let mut grads = tape.backward(loss)?;
            let ge = enc.grads(&mut grads);
            let gp = pp.grads(&mut grads);
            opt.step(&mut [
                Group { name: "encoder", params: &mut model.params, grads: &ge, lr },
                Group { name: "pred", params: &mut predictor.params, grads: &gp, lr },
            ])?;
            ema_update(&mut ema, &model.params)?;
            history.push(HistoryRow {
                step,
                ce: 0.0,
                kd_pca: 0.0,
                kd_gl: 0.0,
                kd_adv: 0.0,
                total: value,
                lr,
            });
            sum += value;
            step += 1;
        }
        log::info!("ssl epoch {epoch}: loss {:.4}", sum / n as f64);
        epoch_losses.push(sum / n as f64);
    }
    Ok(PretrainOutcome {
        ema,
        predictor,
        epoch_losses,
        history,
    })
}
