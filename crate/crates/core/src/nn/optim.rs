use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{Module, Tensor};
use crate::scalar::Scalar;

/// Adam with global-norm clipping followed by elementwise value clamping.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_value: f64,
    pub clip_norm: f64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_value: 5.0,
            clip_norm: 100.0,
            moments: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_value > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::config("gradient clip thresholds must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    /// First and second moments keyed by parameter name.
    pub fn moments(&self) -> &BTreeMap<String, (Vec<T>, Vec<T>)> {
        &self.moments
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) {
        self.moments.insert(name.to_string(), (m, v));
    }

    /// Applies one update to every trainable parameter that holds a gradient,
    /// then clears those gradients. Returns the pre-clipping global norm.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn adam_step<M: Module<T> + ?Sized>(&mut self, model: &mut M) -> Result<f64> {
        self.validate()?;
        let mut sq = 0.0;
        let mut bad = None;
        model.visit("", &mut |name, t| {
            if let (true, Some(g)) = (t.requires_grad(), t.grad()) {
                if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
                    bad = Some(name.to_string());
                }
                sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}; optimizer step aborted")));
        }
        let norm = sq.sqrt();
        let factor = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let cv = self.clip_value;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name, p: &mut Tensor<T>| {
            if !p.requires_grad() {
                return;
            }
            let Some(g) = p.grad().map(<[T]>::to_vec) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let data = p.data_mut();
            for i in 0..g.len() {
                let gi = T::of((g[i].as_f64() * factor).clamp(-cv, cv));
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i].as_f64() / bc1;
                let vh = v[i].as_f64() / bc2;
                data[i] -= T::of(lr * mh / (vh.sqrt() + eps));
            }
            p.zero_grad();
        });
        Ok(norm)
    }
}
