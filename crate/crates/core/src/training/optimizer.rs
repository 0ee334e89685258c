//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Grads, ModelParams};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-tensor first and second moments plus the number of steps taken.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { weight_decay, ..Default::default() }
    }

    /// One update of a single named tensor. `t` is the 1-based step count.
    fn update(&mut self, name: &str, theta: &mut [f64], g: &[f64], lr: f64, t: u64) -> Result<()> {
        if g.len() != theta.len() {
            return Err(Error::shape(format!("gradient for {name} has {} entries, parameter has {}", g.len(), theta.len())));
        }
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        if m.len() != theta.len() || v.len() != theta.len() {
            return Err(Error::shape(format!("optimizer state for {name} does not match the parameter")));
        }
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..theta.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            theta[i] -= lr * (mh / (vh.sqrt() + EPS) + self.weight_decay * theta[i]);
        }
        Ok(())
    }

    /// Applies one step to every parameter. Fails before touching anything if
    /// a gradient is missing or misshapen.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Grads, lr: f64) -> Result<()> {
        for (name, t) in params.named() {
            match grads.get(&name) {
                None => return Err(Error::shape(format!("no gradient for parameter {name}"))),
                Some(g) if g.len() != t.len() => {
                    return Err(Error::shape(format!("gradient for {name} has {} entries, parameter has {}", g.len(), t.len())))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step;
        let mut result = Ok(());
        params.visit_mut(&mut |name, tensor| {
            if result.is_ok() {
                result = self.update(&name, &mut tensor.data, &grads[&name], lr, t);
            }
        });
        result
    }

    /// Moments as named tensors shaped like their parameters.
    pub fn state_tensors(&self, params: &ModelParams) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in params.named() {
            for (tag, map) in [("m", &self.m), ("v", &self.v)] {
                let data = map.get(&name).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
                out.push((format!("adam.{tag}.{name}"), Tensor { shape: t.shape.clone(), data }));
            }
        }
        out
    }

    pub fn from_state_tensors(weight_decay: f64, step: u64, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut opt = AdamW::new(weight_decay);
        opt.step = step;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                opt.m.insert(p.to_string(), t.data.clone());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                opt.v.insert(p.to_string(), t.data.clone());
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ModelConfig;

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig { channels: 2, descriptors: 1, ground_size: (32, 32), aerial_size: (32, 32), heads: 1, layers: 1, ff_dim: 2, ..ModelConfig::default() };
        ModelParams::init(&cfg, 0)
    }

    #[test]
    fn zero_gradient_is_identity_or_pure_decay() {
        let p0 = tiny_params();
        let zeros: Grads = p0.named().into_iter().map(|(n, t)| (n, vec![0.0; t.len()])).collect();
        let mut p = p0.clone();
        AdamW::new(0.0).step(&mut p, &zeros, 1e-3).unwrap();
        assert_eq!(p, p0);

        let mut p = p0.clone();
        AdamW::new(0.03).step(&mut p, &zeros, 1e-2).unwrap();
        for ((_, a), (_, b)) in p.named().into_iter().zip(p0.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y * (1.0 - 1e-2 * 0.03)).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn three_steps_match_hand_unrolled_trace() {
        let (lr, wd, g) = (0.1, 0.03, 0.5);
        let mut theta = [2.0];
        let mut opt = AdamW::new(wd);
        for t in 1..=3 {
            opt.update("x", &mut theta, &[g], lr, t).unwrap();
        }
        // m_t = 0.5 (1 - 0.9^t), v_t = 0.25 (1 - 0.999^t): bias-corrected both equal g and g^2,
        // so every step moves by lr * (g / (|g| + eps) + wd * theta).
        let mut want = 2.0f64;
        for _ in 0..3 {
            want -= lr * (0.5 / (0.5 + 1e-8) + wd * want);
        }
        assert!((theta[0] - want).abs() <= 1e-12, "{} vs {want}", theta[0]);
    }

    #[test]
    fn varying_gradient_trace() {
        let grads = [1.0, -2.0, 0.5];
        let mut theta = [1.0];
        let mut opt = AdamW::new(0.0);
        for (t, g) in grads.iter().enumerate() {
            opt.update("x", &mut theta, &[*g], 0.01, t as u64 + 1).unwrap();
        }
        let (mut m, mut v, mut th) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            th -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((theta[0] - th).abs() <= 1e-15);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100) <= 1e-12);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(1e-3, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn missing_gradient_leaves_params_untouched() {
        let p0 = tiny_params();
        let mut p = p0.clone();
        let mut opt = AdamW::new(0.0);
        assert!(opt.step(&mut p, &Grads::new(), 1e-3).is_err());
        assert_eq!(p, p0);
        assert_eq!(opt.step, 0);
    }
}
