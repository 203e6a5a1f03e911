//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Ordered map from dotted parameter name (e.g. `mpa.acoustic.l0.attn.wq`) to
/// tensor. Iteration order is lexicographic, which keeps every pass over the
/// set deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        t.requires_grad = true;
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Reset every parameter's gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            let n = t.numel();
            match &mut t.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                slot @ None => *slot = Some(vec![0.0; n]),
            }
        }
    }

    /// Drop all gradient buffers.
    pub fn clear_grads(&mut self) {
        for t in self.map.values_mut() {
            t.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[Real]) -> Result<()> {
        let t = self.get_mut(name)?;
        if g.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                details: format!("{name}: grad len {} vs {}", g.len(), t.numel()),
            });
        }
        match &mut t.grad {
            Some(buf) => crate::kernels::axpy(1.0, g, buf),
            slot @ None => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Scale every gradient in place (e.g. by 1/batch).
    pub fn scale_grads(&mut self, factor: Real) {
        for t in self.map.values_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}

// ── initializers ─────────────────────────────────────────────────────

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.gen_range(-bound..bound)) as Real)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Bias-corrected Adam state over a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    pub learning_rate: Real,
    pub step: u64,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl AdamState {
    /// Defaults: beta1 0.9, beta2 0.98, eps 1e-9, lr 0.00625.
    pub fn new(params: &ParameterSet) -> Self {
        Self::with_hyperparams(params, 0.9, 0.98, 1e-9, 0.00625)
    }

    pub fn with_hyperparams(
        params: &ParameterSet,
        beta1: Real,
        beta2: Real,
        epsilon: Real,
        learning_rate: Real,
    ) -> Self {
        let m = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        AdamState {
            beta1,
            beta2,
            epsilon,
            learning_rate,
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected update over every parameter. Every parameter must
    /// have a populated gradient buffer.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for (name, p) in params.map.iter_mut() {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .clone();
            let m = self.m.get_mut(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let (b1, b2) = (self.beta1, self.beta2);
            let lr = self.learning_rate;
            let eps = self.epsilon;
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1 as Real;
                let vhat = *vv / bc2 as Real;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&[Real], &[Real])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    pub fn moments_mut(&mut self, name: &str) -> Option<(&mut Vec<Real>, &mut Vec<Real>)> {
        // Map both or neither; names always agree by construction.
        let m = self.m.get_mut(name)? as *mut Vec<Real>;
        let v = self.v.get_mut(name)?;
        // SAFETY: m and v come from two disjoint BTreeMaps.
        Some((unsafe { &mut *m }, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.insert("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut ps = ParameterSet::new();
        ps.insert("b", Tensor::zeros(&[1])).unwrap();
        ps.insert("a.z", Tensor::zeros(&[1])).unwrap();
        ps.insert("a.a", Tensor::zeros(&[1])).unwrap();
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, vec!["a.a", "a.z", "b"]);
    }

    #[test]
    fn adam_defaults_match_training_setup() {
        let ps = ParameterSet::new();
        let adam = AdamState::new(&ps);
        assert_eq!(adam.beta1, 0.9);
        assert_eq!(adam.beta2, 0.98);
        assert_eq!(adam.epsilon, 1e-9);
        assert_eq!(adam.learning_rate, 0.00625);
    }

    #[test]
    fn adam_zero_grad_leaves_param_unchanged() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap()).unwrap();
        let mut adam = AdamState::new(&ps);
        ps.zero_grads();
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn adam_missing_grad_names_parameter() {
        let mut ps = ParameterSet::new();
        ps.insert("enc.w", Tensor::zeros(&[2])).unwrap();
        let mut adam = AdamState::new(&ps);
        let err = adam.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "{err}");
    }

    #[test]
    fn adam_single_step_matches_hand_recurrence() {
        // scalar param, constant grad 1: m=0.1*1? no: m=(1-b1)*g=0.1, v=(1-b2)*g^2=0.02
        // mhat=0.1/0.1=1, vhat=0.02/0.02=1 -> update = lr*1/(1+eps) ~= lr
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut adam = AdamState::new(&ps);
        ps.zero_grads();
        ps.accumulate_grad("w", &[1.0]).unwrap();
        adam.step(&mut ps).unwrap();
        let got = ps.get("w").unwrap().item();
        let want = -adam.learning_rate; // bias correction makes step ~= lr exactly
        assert!((got - want).abs() < 1e-7, "got {got}, want {want}");
    }

    #[test]
    fn uniform_fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = uniform_fan_in(&mut rng, &[64, 64], 64);
        let bound = 1.0 / 8.0;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > bound * 0.5));
    }
}
