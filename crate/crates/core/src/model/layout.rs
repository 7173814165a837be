use super::{ArchKind, ArchSpec};
use crate::error::Result;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Linear,
    Conv { fan_in: usize },
    Bias,
    NormWeight,
    NormBias,
    Token,
    PosEmbed,
}

/// One named parameter tensor of an architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSlot {
    fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Layout(Vec<ParamSlot>);

impl Layout {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.0.push(ParamSlot::new(format!("{prefix}.weight"), &[fan_out, fan_in], ParamKind::Linear));
        self.0.push(ParamSlot::new(format!("{prefix}.bias"), &[fan_out], ParamKind::Bias));
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.0.push(ParamSlot::new(format!("{prefix}.weight"), &[dim], ParamKind::NormWeight));
        self.0.push(ParamSlot::new(format!("{prefix}.bias"), &[dim], ParamKind::NormBias));
    }

    /// Bias-free convolution followed by batch norm.
    fn conv_bn(&mut self, prefix: &str, cin_per_group: usize, cout: usize, k: usize) {
        self.0.push(ParamSlot::new(
            format!("{prefix}.conv.weight"),
            &[cout, cin_per_group, k, k],
            ParamKind::Conv {
                fan_in: cin_per_group * k * k,
            },
        ));
        self.norm(&format!("{prefix}.bn"), cout);
    }
}

/// Every parameter tensor of `spec`, in construction order.
pub fn param_layout(spec: &ArchSpec) -> Result<Vec<ParamSlot>> {
    spec.validate()?;
    let mut l = Layout(Vec::new());
    match spec.kind {
        ArchKind::Vit => vit_layout(spec, &mut l),
        ArchKind::Cnn => cnn_layout(spec, &mut l),
        ArchKind::MobilenetV2 => mobilenet_v2_layout(spec, &mut l),
    }
    Ok(l.0)
}

fn vit_layout(spec: &ArchSpec, l: &mut Layout) {
    let d = spec.embed_dim;
    let p = spec.patch_size;
    let hidden = spec.mlp_hidden();
    l.0.push(ParamSlot::new(
        "patch_embed.weight",
        &[d, 3, p, p],
        ParamKind::Conv { fan_in: 3 * p * p },
    ));
    l.0.push(ParamSlot::new("patch_embed.bias", &[d], ParamKind::Bias));
    l.0.push(ParamSlot::new("cls_token", &[1, 1, d], ParamKind::Token));
    l.0.push(ParamSlot::new("pos_embed", &[spec.num_patches() + 1, d], ParamKind::PosEmbed));
    for i in 0..spec.depth {
        let b = format!("blocks.{i}");
        l.norm(&format!("{b}.norm1"), d);
        l.linear(&format!("{b}.attn.qkv"), d, 3 * d);
        l.linear(&format!("{b}.attn.proj"), d, d);
        l.norm(&format!("{b}.norm2"), d);
        l.linear(&format!("{b}.mlp.fc1"), d, hidden);
        l.linear(&format!("{b}.mlp.fc2"), hidden, d);
    }
    l.norm("norm", d);
    l.linear("head", d, spec.num_classes);
}

fn cnn_layout(spec: &ArchSpec, l: &mut Layout) {
    let mut cin = 3;
    for (i, &c) in spec.channel_plan.iter().enumerate() {
        l.conv_bn(&format!("stages.{i}"), cin, c, 3);
        cin = c;
    }
    l.linear("head", cin, spec.num_classes);
}

/// Rounds channel counts to a multiple of 8, never dropping below 90%.
fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() * d;
    new_v = new_v.max(d);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

fn mobilenet_v2_layout(spec: &ArchSpec, l: &mut Layout) {
    // (expansion, channels, repeats, stride)
    const PLAN: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let w = spec.width_mult;
    let mut cin = make_divisible(32.0 * w, 8);
    let last = make_divisible(1280.0 * w.max(1.0), 8);
    l.conv_bn("features.0", 3, cin, 3);
    let mut idx = 1;
    for (t, c, n, _stride) in PLAN {
        let cout = make_divisible(c as f64 * w, 8);
        for _ in 0..n {
            let hidden = cin * t;
            let b = format!("features.{idx}");
            if t != 1 {
                l.conv_bn(&format!("{b}.expand"), cin, hidden, 1);
            }
            // depthwise: one input channel per group
            l.conv_bn(&format!("{b}.depthwise"), 1, hidden, 3);
            l.conv_bn(&format!("{b}.project"), hidden, cout, 1);
            cin = cout;
            idx += 1;
        }
    }
    l.conv_bn(&format!("features.{idx}"), cin, last, 1);
    l.linear("classifier", last, spec.num_classes);
}
