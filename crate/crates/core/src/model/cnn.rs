use super::{Mode, Model, TapeForward};
use crate::error::Result;
use crate::nn::{self, Bound, BN_EPS};
use crate::tensor::{Scalar, Var};

pub(super) fn forward<'t, E: Scalar>(
    model: &Model<E>,
    p: &Bound<'t, E>,
    x: Var<'t, E>,
    mode: Mode,
    want_features: bool,
) -> Result<TapeForward<'t, E>> {
    let mut h = x;
    let mut bn_stats = Vec::new();
    for i in 0..model.spec.channel_plan.len() {
        let s = format!("stages.{i}");
        h = h.conv2d(p.get(&format!("{s}.conv.weight"))?, None, 1, 2)?;
        let gamma = p.get(&format!("{s}.bn.weight"))?;
        let beta = p.get(&format!("{s}.bn.bias"))?;
        let (y, stats) = match mode {
            Mode::Train => h.batch_norm(gamma, beta, None, BN_EPS)?,
            Mode::Eval => {
                let rm = &model.buffers[&format!("{s}.bn.running_mean")];
                let rv = &model.buffers[&format!("{s}.bn.running_var")];
                h.batch_norm(gamma, beta, Some((rm.data(), rv.data())), BN_EPS)?
            }
        };
        if let Some(st) = stats {
            bn_stats.push((format!("{s}.bn"), st));
        }
        h = y.relu();
    }
    let shape = h.shape();
    let pooled = h
        .reshape(vec![shape[0], shape[1], shape[2] * shape[3]])?
        .mean_axis(2)?;
    let logits = nn::linear(p, "head", pooled)?;
    Ok(TapeForward {
        logits,
        features: want_features.then_some(h),
        attention: None,
        bn_stats,
    })
}
