//! Teacher/student architectures, symbolic parameter counting, forward
//! passes with feature hooks, and the checkpoint container.

pub mod checkpoint;
mod cnn;
mod layout;
pub(crate) mod vit;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamMap};
use crate::tensor::{BatchNormStats, Scalar, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, Stored, FORMAT_VERSION, MAGIC, RESERVED_NAMESPACES};
pub use layout::{param_layout, ParamKind, ParamSlot};
pub use vit::sincos_2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Vit,
    Cnn,
    /// Inverted-residual plan; counted symbolically, never instantiated.
    MobilenetV2,
}

/// Declarative architecture description, used both to build models and to
/// count their parameters without allocating them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub image_size: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub embed_dim: usize,
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub heads: usize,
    #[serde(default)]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub channel_plan: Vec<usize>,
    #[serde(default = "one")]
    pub width_mult: f64,
    pub num_classes: usize,
}

fn one() -> f64 {
    1.0
}

impl ArchSpec {
    pub fn vit(
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: f64,
        num_classes: usize,
    ) -> Self {
        Self {
            kind: ArchKind::Vit,
            image_size,
            patch_size,
            embed_dim,
            depth,
            heads,
            mlp_ratio,
            channel_plan: Vec::new(),
            width_mult: 1.0,
            num_classes,
        }
    }

    pub fn cnn(image_size: usize, channel_plan: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::Cnn,
            image_size,
            patch_size: 0,
            embed_dim: 0,
            depth: 0,
            heads: 0,
            mlp_ratio: 0.0,
            channel_plan,
            width_mult: 1.0,
            num_classes,
        }
    }

    /// ViT-Base/16 at 224 px.
    pub fn vit_base_16(num_classes: usize) -> Self {
        Self::vit(224, 16, 768, 12, 12, 4.0, num_classes)
    }

    /// MobileNetV2 at width 1.0, 224 px.
    pub fn mobilenet_v2(num_classes: usize) -> Self {
        Self {
            kind: ArchKind::MobilenetV2,
            image_size: 224,
            width_mult: 1.0,
            ..Self::cnn(224, Vec::new(), num_classes)
        }
    }

    /// Desk-scale teacher: 32 px, 8 px patches (a 4×4 grid, matching the
    /// toy student's feature map), 64-dim, 2 blocks, 4 heads.
    pub fn toy_vit(num_classes: usize) -> Self {
        Self::vit(32, 8, 64, 2, 4, 2.0, num_classes)
    }

    /// Desk-scale student: three stride-2 conv stages on 32 px input.
    pub fn toy_cnn(num_classes: usize) -> Self {
        Self::cnn(32, vec![16, 32, 64], num_classes)
    }

    /// Looks up a named preset (`vit-base-16`, `mobilenet-v2`, `toy-vit`, `toy-cnn`).
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "vit-base-16" | "vit_b_16" => Ok(Self::vit_base_16(num_classes)),
            "mobilenet-v2" | "mobilenet_v2" => Ok(Self::mobilenet_v2(num_classes)),
            "toy-vit" => Ok(Self::toy_vit(num_classes)),
            "toy-cnn" => Ok(Self::toy_cnn(num_classes)),
            other => Err(Error::UnsupportedArch(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::UnsupportedArch(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        match self.kind {
            ArchKind::Vit => {
                if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                    return bad(format!(
                        "image size {} is not divisible into {} px patches",
                        self.image_size, self.patch_size
                    ));
                }
                if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
                    return bad(format!(
                        "embed dim {} is not divisible by {} heads",
                        self.embed_dim, self.heads
                    ));
                }
                if self.depth == 0 || self.mlp_ratio <= 0.0 {
                    return bad("vit needs depth >= 1 and a positive mlp ratio".into());
                }
            }
            ArchKind::Cnn => {
                if self.channel_plan.is_empty() || self.channel_plan.contains(&0) {
                    return bad("cnn channel plan must be non-empty and positive".into());
                }
            }
            ArchKind::MobilenetV2 => {
                if self.width_mult <= 0.0 {
                    return bad("width multiplier must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Patch grid side for a ViT.
    pub fn grid(&self) -> usize {
        if self.patch_size == 0 {
            0
        } else {
            self.image_size / self.patch_size
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Channels of the feature map exposed by the hook.
    pub fn feature_channels(&self) -> usize {
        match self.kind {
            ArchKind::Vit => self.embed_dim,
            _ => self.channel_plan.last().copied().unwrap_or(0),
        }
    }

    /// Spatial side of the hooked feature map.
    pub fn feature_side(&self) -> usize {
        match self.kind {
            ArchKind::Vit => self.grid(),
            _ => self
                .channel_plan
                .iter()
                .fold(self.image_size, |s, _| (s + 2 - 3) / 2 + 1),
        }
    }

    /// Canonical JSON used inside checkpoints.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("ArchSpec serializes")
    }
}

/// Exact parameter count, computed from the spec alone.
pub fn count_params(spec: &ArchSpec) -> Result<usize> {
    Ok(param_layout(spec)?.iter().map(ParamSlot::numel).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A constructed network: its spec, trainable parameters, and buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Model<E: Scalar = f32> {
    pub spec: ArchSpec,
    pub params: ParamMap<E>,
    pub buffers: ParamMap<E>,
    pub hook_layer: String,
}

/// Inference outputs. Teacher features are `[B,N+1,D]` tokens and attention is
/// the last block's `[B,heads,N+1,N+1]`; student features are `[B,C,H,W]`.
#[derive(Clone, Debug)]
pub struct ForwardResult<E: Scalar = f32> {
    pub logits: Tensor<E>,
    pub features: Option<Tensor<E>>,
    pub attention: Option<Tensor<E>>,
}

/// Outputs recorded on a tape.
pub struct TapeForward<'t, E: Scalar = f32> {
    pub logits: Var<'t, E>,
    pub features: Option<Var<'t, E>>,
    pub attention: Option<Var<'t, E>>,
    pub bn_stats: Vec<(String, BatchNormStats)>,
}

fn init_params<E: Scalar>(spec: &ArchSpec, rng: &mut impl Rng) -> Result<(ParamMap<E>, ParamMap<E>)> {
    let mut params = ParamMap::new();
    let mut buffers = ParamMap::new();
    for slot in param_layout(spec)? {
        let t = match slot.kind {
            ParamKind::Linear => nn::trunc_normal(rng, &slot.shape, 0.02),
            ParamKind::Conv { fan_in } => nn::kaiming_uniform(rng, &slot.shape, fan_in),
            ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(slot.shape.clone()),
            ParamKind::NormWeight => Tensor::ones(slot.shape.clone()),
            ParamKind::Token => nn::trunc_normal(rng, &slot.shape, 0.02),
            ParamKind::PosEmbed => vit::pos_embed_with_cls(spec.grid(), spec.embed_dim),
        };
        if let Some(bn) = slot.name.strip_suffix(".bn.weight") {
            let c = slot.shape[0];
            buffers.insert(format!("{bn}.bn.running_mean"), Tensor::zeros(vec![c]));
            buffers.insert(format!("{bn}.bn.running_var"), Tensor::ones(vec![c]));
        }
        params.insert(slot.name, t);
    }
    Ok((params, buffers))
}

/// Builds the ViT teacher: patch embedding, fixed 2-D sinusoidal positions,
/// CLS token, pre-norm encoder blocks, final norm, linear head on CLS.
pub fn build_teacher<E: Scalar>(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Model<E>> {
    if spec.kind != ArchKind::Vit {
        return Err(Error::UnsupportedArch(format!("teacher must be a vit, got {:?}", spec.kind)));
    }
    spec.validate()?;
    let (params, buffers) = init_params(spec, rng)?;
    Ok(Model {
        spec: spec.clone(),
        params,
        buffers,
        hook_layer: format!("blocks.{}", spec.depth - 1),
    })
}

/// Builds the CNN student: conv-BN-ReLU stages (each stride 2), global
/// average pool, linear head. The hook is the last stage's output.
pub fn build_student<E: Scalar>(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Model<E>> {
    match spec.kind {
        ArchKind::Cnn => {}
        ArchKind::MobilenetV2 => {
            return Err(Error::UnsupportedArch(
                "mobilenet_v2 is supported for parameter counting only".into(),
            ))
        }
        ArchKind::Vit => return Err(Error::UnsupportedArch("student must be a cnn".into())),
    }
    if spec.channel_plan.is_empty() {
        return Err(Error::UnsupportedArch("empty channel plan".into()));
    }
    spec.validate()?;
    let (params, buffers) = init_params(spec, rng)?;
    Ok(Model {
        spec: spec.clone(),
        params,
        buffers,
        hook_layer: format!("stages.{}", spec.channel_plan.len() - 1),
    })
}

/// Builds whichever of teacher or student the spec describes.
pub fn build<E: Scalar>(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Model<E>> {
    match spec.kind {
        ArchKind::Vit => build_teacher(spec, rng),
        _ => build_student(spec, rng),
    }
}

impl<E: Scalar> Model<E> {
    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }

    /// Parameters updated by the optimizer (the positional table is fixed).
    pub fn is_trainable(name: &str) -> bool {
        name != "pos_embed"
    }

    pub fn cast<F: Scalar>(&self) -> Model<F> {
        Model {
            spec: self.spec.clone(),
            params: nn::cast_map(&self.params),
            buffers: nn::cast_map(&self.buffers),
            hook_layer: self.hook_layer.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.spec.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape("forward input", shape, &[0, 3, s, s]));
        }
        Ok(())
    }

    /// Records a forward pass using parameters bound on the same tape.
    pub fn forward_tape<'t>(
        &self,
        p: &Bound<'t, E>,
        x: Var<'t, E>,
        mode: Mode,
        want_features: bool,
    ) -> Result<TapeForward<'t, E>> {
        self.check_input(&x.shape())?;
        match self.spec.kind {
            ArchKind::Vit => vit::forward(&self.spec, p, x, want_features),
            ArchKind::Cnn => cnn::forward(self, p, x, mode, want_features),
            ArchKind::MobilenetV2 => Err(Error::UnsupportedArch("mobilenet_v2 forward".into())),
        }
    }

    /// Eval-mode inference without gradient tracking.
    pub fn forward(&self, batch: &Tensor<E>, want_features: bool) -> Result<ForwardResult<E>> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.params);
        let x = tape.constant(batch.clone());
        let out = self.forward_tape(&p, x, Mode::Eval, want_features)?;
        Ok(ForwardResult {
            logits: out.logits.value(),
            features: out.features.map(|v| v.value()),
            attention: out.attention.map(|v| v.value()),
        })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_bn(&mut self, stats: &[(String, BatchNormStats)], momentum: f64) {
        for (name, s) in stats {
            for (suffix, src) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{name}.{suffix}")) {
                    for (r, &b) in buf.data_mut().iter_mut().zip(src.iter()) {
                        let old = r.to_f64().unwrap_or(0.0);
                        *r = E::c((1.0 - momentum) * old + momentum * b);
                    }
                }
            }
        }
    }
}
