//! Central finite-difference gradient checking.
//!
//! Checks run at `f64`: an `f32` central difference at step 1e-3 carries
//! rounding noise of roughly 1e-4 on its own, the same size as the tolerance.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-5;

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `(input, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Largest `|a − n| / max(rel·max(|a|,|n|), abs)`; ≤ 1 passes.
    pub worst_ratio: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Tolerance ratio for one element; ≤ 1 is a pass.
pub fn error_ratio(analytic: f64, numeric: f64) -> f64 {
    let bound = (REL_TOL * analytic.abs().max(numeric.abs())).max(ABS_TOL);
    (analytic - numeric).abs() / bound
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss(out.shape()));
    }
    Ok(out.item())
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradReport {
        worst: None,
        worst_ratio: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + EPS;
            let up = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0 - EPS;
            let down = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * EPS);
            let r = error_ratio(analytic[j], numeric);
            report.checked += 1;
            if r > report.worst_ratio || report.worst.is_none() {
                report.worst_ratio = r.max(report.worst_ratio);
                report.worst = Some((i, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // detach hides x from the tape, so the analytic gradient is zero
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let r = check(&[x.clone()], |_, v| Ok(v[0].detach().square().sum())).unwrap();
        assert!(!r.passed());
        let ok = check(&[x], |_, v| Ok(v[0].square().sum())).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.checked, 3);
    }
}
