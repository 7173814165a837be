//! Named parameter maps, binding them onto a tape, initializers, and the
//! small layer helpers shared by the models and projectors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Parameters by name, in sorted order.
pub type ParamMap<E = f32> = BTreeMap<String, Tensor<E>>;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;

/// Parameters recorded on a tape, looked up by name.
pub struct Bound<'t, E: Scalar = f32> {
    vars: BTreeMap<String, Var<'t, E>>,
}

impl<'t, E: Scalar> Bound<'t, E> {
    pub fn empty() -> Self {
        Self {
            vars: BTreeMap::new(),
        }
    }

    /// Records every parameter; those for which `trainable(name)` holds track gradients.
    pub fn bind(tape: &'t Tape<E>, params: &ParamMap<E>, trainable: impl Fn(&str) -> bool) -> Self {
        let mut b = Self::empty();
        b.add(tape, params, trainable);
        b
    }

    /// Records every parameter as a constant.
    pub fn frozen(tape: &'t Tape<E>, params: &ParamMap<E>) -> Self {
        Self::bind(tape, params, |_| false)
    }

    pub fn add(&mut self, tape: &'t Tape<E>, params: &ParamMap<E>, trainable: impl Fn(&str) -> bool) {
        for (name, t) in params {
            let leaf = t.clone().with_requires_grad(trainable(name));
            self.vars.insert(name.clone(), tape.leaf(leaf));
        }
    }

    /// Binds an existing tape variable under `name`, replacing any previous one.
    pub fn insert(&mut self, name: impl Into<String>, var: Var<'t, E>) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, E>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, E>)> {
        self.vars.iter()
    }

    /// Gradients of the bound parameters that received one.
    pub fn grads(&self, grads: &mut Gradients<E>) -> BTreeMap<String, Vec<E>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// `x·Wᵀ + b` with `W: [out, in]` stored under `{prefix}.weight` / `{prefix}.bias`.
pub fn linear<'t, E: Scalar>(p: &Bound<'t, E>, prefix: &str, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let y = x.matmul(w.t()?)?;
    match p.get(&format!("{prefix}.bias")) {
        Ok(b) => y.add_suffix(b),
        Err(_) => Ok(y),
    }
}

/// Layer norm over the last axis with affine `{prefix}.weight` / `{prefix}.bias`.
pub fn layer_norm<'t, E: Scalar>(p: &Bound<'t, E>, prefix: &str, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let g = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    x.layer_norm(LN_EPS).mul_suffix(g)?.add_suffix(b)
}

/// Normal(0, std) resampled until within two standard deviations.
pub fn trunc_normal<E: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<E> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break E::c(v);
        }
    })
}

/// He-uniform for ReLU networks: U(−√(6/fan_in), √(6/fan_in)).
pub fn kaiming_uniform<E: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape.to_vec(), |_| E::c(dist.sample(rng)))
}

pub fn cast_map<E: Scalar, F: Scalar>(m: &ParamMap<E>) -> ParamMap<F> {
    m.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

pub fn param_count<E: Scalar>(m: &ParamMap<E>) -> usize {
    m.values().map(Tensor::numel).sum()
}

/// Prefixes every name with `{ns}.`.
pub fn namespaced<E: Scalar>(ns: &str, m: &ParamMap<E>) -> ParamMap<E> {
    m.iter().map(|(k, v)| (format!("{ns}.{k}"), v.clone())).collect()
}

/// Entries under `{ns}.`, with the namespace stripped.
pub fn strip_namespace<E: Scalar>(ns: &str, m: &ParamMap<E>) -> ParamMap<E> {
    let prefix = format!("{ns}.");
    m.iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// Cross-entropy of `[B,K]` logits against integer labels. With class
/// weights the per-sample terms are weighted and divided by the weight total.
pub fn cross_entropy<'t, E: Scalar>(
    logits: Var<'t, E>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var<'t, E>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &s, &[labels.len(), 0]));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let w = |y: usize| class_weights.map_or(1.0, |cw| cw[y]);
    let total: f64 = labels.iter().map(|&y| w(y)).sum();
    let mask = Tensor::from_fn(vec![labels.len(), k], |i| {
        let y = labels[i / k];
        if i % k == y {
            E::c(w(y))
        } else {
            E::zero()
        }
    });
    let picked = logits.log_softmax(1)?.mul(logits.tape().constant(mask))?.sum();
    Ok(picked.scale(-1.0 / total))
}

/// Order-sensitive FNV digest of every value; equal digests mean untouched parameters.
pub fn checksum<E: Scalar>(m: &ParamMap<E>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, v) in m {
        for b in k.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        for x in v.data() {
            let bits = x.to_f64().unwrap_or(f64::NAN).to_bits();
            h = (h ^ bits).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_matches_hand_product() {
        let tape = Tape::<f64>::new();
        let mut params = ParamMap::new();
        params.insert("fc.weight".into(), Tensor::from_f64(vec![2, 3], &[1., 0., 1., 0., 2., 0.]).unwrap());
        params.insert("fc.bias".into(), Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap());
        let p = Bound::frozen(&tape, &params);
        let x = tape.constant(Tensor::from_f64(vec![1, 3], &[1., 2., 3.]).unwrap());
        let y = linear(&p, "fc", x).unwrap().to_vec();
        assert_eq!(y, vec![4.5, 3.0]);
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut r = rng::stream(1, "init");
        let t: Tensor<f64> = trunc_normal(&mut r, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn namespace_roundtrip() {
        let mut m = ParamMap::<f32>::new();
        m.insert("w".into(), Tensor::ones(vec![2]));
        let ns = namespaced("gl", &m);
        assert!(ns.contains_key("gl.w"));
        assert_eq!(strip_namespace("gl", &ns), m);
    }
}
