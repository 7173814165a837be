use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamMap;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub total_steps: usize,
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`, step clamped to `[0, total]`.
pub fn cosine_lr(step: usize, s: &Schedule) -> f64 {
    if s.total_steps == 0 {
        return s.lr_max;
    }
    let t = step.min(s.total_steps) as f64 / s.total_steps as f64;
    s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. One instance serves any number of
/// parameter groups, keyed by `group/name`; the step counter is shared.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

/// One named group of parameters with its gradients and learning rate.
pub struct Group<'a, E: Scalar> {
    pub name: &'a str,
    pub params: &'a mut ParamMap<E>,
    pub grads: &'a BTreeMap<String, Vec<E>>,
    pub lr: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient. A non-finite gradient
    /// aborts the whole step before anything changes.
    pub fn step<E: Scalar>(&mut self, groups: &mut [Group<'_, E>]) -> Result<()> {
        for g in groups.iter() {
            for (name, grad) in g.grads {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("{}/{name}", g.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for g in groups.iter_mut() {
            for (name, grad) in g.grads {
                let Some(p) = g.params.get_mut(name) else {
                    return Err(Error::invalid(format!("gradient for unknown parameter `{}/{name}`", g.name)));
                };
                if p.numel() != grad.len() {
                    return Err(Error::shape("optimizer_step", p.shape(), &[grad.len()]));
                }
                let st = self.state.entry(format!("{}/{name}", g.name)).or_default();
                if st.m.is_empty() {
                    st.m = vec![0.0; grad.len()];
                    st.v = vec![0.0; grad.len()];
                }
                let shrink = 1.0 - g.lr * self.weight_decay;
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    let gi = grad[i].to_f64().unwrap_or(0.0);
                    st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                    st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                    let m_hat = st.m[i] / bc1;
                    let v_hat = st.v[i] / bc2;
                    let wf = w.to_f64().unwrap_or(0.0) * shrink;
                    *w = E::c(wf - g.lr * m_hat / (v_hat.sqrt() + self.eps));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ParamMap<f64> {
        let mut m = ParamMap::new();
        m.insert("w".into(), Tensor::from_f64(vec![1], &[v]).unwrap());
        m
    }

    fn grads(g: f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), vec![g])])
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            lr_min: 0.1,
            lr_max: 1.0,
            total_steps: 100,
        };
        assert_eq!(cosine_lr(0, &s), 1.0);
        assert!((cosine_lr(100, &s) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(50, &s) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_lr(500, &s), cosine_lr(100, &s));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(0.5);
        let g = grads(1.0);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut [Group { name: "s", params: &mut p, grads: &g, lr: 0.01 }]).unwrap();
        let expect = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p["w"].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut p = one(2.0);
        let g = grads(0.0);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut [Group { name: "s", params: &mut p, grads: &g, lr: 0.1 }]).unwrap();
        assert_eq!(p["w"].data()[0], 2.0);
        let mut opt = AdamW::new(0.5);
        opt.step(&mut [Group { name: "s", params: &mut p, grads: &g, lr: 0.1 }]).unwrap();
        assert!((p["w"].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn nan_aborts_with_name() {
        let mut p = one(1.0);
        let g = grads(f64::NAN);
        let mut opt = AdamW::new(0.0);
        let err = opt
            .step(&mut [Group { name: "student", params: &mut p, grads: &g, lr: 0.1 }])
            .unwrap_err();
        assert!(err.to_string().contains("student/w"));
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
