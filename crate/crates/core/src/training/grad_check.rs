//! Finite-difference verification of the analytic gradients of the full
//! training objective.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::features::{Branch, ModelConfig};
use crate::imaging::{Image, View};
use crate::losses::LossConfig;
use crate::model::{loss_and_grads, total_loss, ModelParams, Objective, TrainingBatch};
use crate::rng;

/// Relative errors are `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub batch: usize,
    pub step: f64,
    pub seed: u64,
    /// Check at most this many evenly spaced entries per tensor; `None` checks all.
    pub entries_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                channels: 4,
                descriptors: 2,
                ground_size: (32, 64),
                aerial_size: (32, 64),
                heads: 2,
                layers: 2,
                ff_dim: 8,
                dropout: 0.0,
                share_weights: false,
                normalize_embeddings: true,
            },
            loss: LossConfig::default(),
            batch: 2,
            step: 1e-5,
            seed: 0,
            entries_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_grad: f64,
    /// L2 norm of the gradient of the counterfactual terms alone.
    pub cf_grad_norm: f64,
}

impl TensorReport {
    /// True when the counterfactual terms contribute nothing to this tensor.
    pub fn cf_zero(&self) -> bool {
        self.cf_grad_norm == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cf_enabled: bool,
    pub loss: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err <= tol)
    }

    pub fn table(&self) -> String {
        let mut s = format!("loss {:.9}  cf_enabled {}\n", self.loss, self.cf_enabled);
        let _ = writeln!(s, "{:<44} {:>7} {:>12} {:>12} {:>12}  flags", "tensor", "checked", "max_rel_err", "max_abs_err", "cf_grad");
        for t in &self.tensors {
            let flag = if t.cf_zero() { "cf-zero" } else { "" };
            let _ = writeln!(
                s,
                "{:<44} {:>7} {:>12.3e} {:>12.3e} {:>12.3e}  {flag}",
                t.name, t.checked, t.max_rel_err, t.max_abs_err, t.cf_grad_norm
            );
        }
        let _ = writeln!(s, "max relative error {:.3e}", self.max_rel_err());
        s
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Harness self-test on `f(x) = x^2`: relative error of the central difference
/// against `2x`.
pub fn quadratic_self_test(x: f64, h: f64) -> f64 {
    let f = |v: f64| v * v;
    rel_err(2.0 * x, (f(x + h) - f(x - h)) / (2.0 * h))
}

fn random_image(size: (usize, usize), view: View, r: &mut rng::Rng) -> Image {
    let data = (0..size.0 * size.1 * 3).map(|_| r.random::<f64>()).collect();
    Image { height: size.0, width: size.1, data, view }
}

/// Random inputs, parameters and imaginary descriptors for a check.
pub fn grad_check_setup(cfg: &GradCheckConfig) -> (ModelParams, TrainingBatch) {
    let mut r = rng::derived(cfg.seed, &[0x9c]);
    let params = ModelParams::init(&cfg.model, cfg.seed);
    let mut batch = TrainingBatch {
        ground: (0..cfg.batch).map(|_| random_image(cfg.model.input_size(Branch::Ground), View::Panorama, &mut r)).collect(),
        aerial: (0..cfg.batch).map(|_| random_image(cfg.model.input_size(Branch::Aerial), View::Panorama, &mut r)).collect(),
        imaginary_ground: vec![],
        imaginary_aerial: vec![],
        dropout_seeds: None,
    };
    if cfg.loss.cf_enabled {
        batch.sample_imaginary(&cfg.model, rng::derive_seed(cfg.seed, &[0xcf]));
    }
    (params, batch)
}

fn perturbed(params: &ModelParams, name: &str, i: usize, delta: f64) -> ModelParams {
    let mut p = params.clone();
    p.visit_mut(&mut |n, t| {
        if n == name {
            t.data[i] += delta;
        }
    });
    p
}

/// Compares analytic and central-difference gradients of the total loss for
/// every parameter tensor.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.model.validate()?;
    let (params, batch) = grad_check_setup(cfg);
    let (parts, grads) = loss_and_grads(&batch, &params, &cfg.model, &cfg.loss, Objective::Total)?;
    let (_, cf_grads) = loss_and_grads(&batch, &params, &cfg.model, &cfg.loss, Objective::CounterfactualOnly)?;

    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        let n = t.len();
        let stride = cfg.entries_per_tensor.map_or(1, |k| n.div_ceil(k.max(1)));
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let numeric: Vec<f64> = idx
            .par_iter()
            .map(|&i| {
                let plus = total_loss(&batch, &perturbed(&params, &name, i, cfg.step), &cfg.model, &cfg.loss)?.total();
                let minus = total_loss(&batch, &perturbed(&params, &name, i, -cfg.step), &cfg.model, &cfg.loss)?.total();
                Ok((plus - minus) / (2.0 * cfg.step))
            })
            .collect::<Result<_>>()?;
        let g = &grads[&name];
        let mut rep = TensorReport {
            name: name.clone(),
            numel: n,
            checked: idx.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_abs_grad: g.iter().fold(0.0, |m, v| m.max(v.abs())),
            cf_grad_norm: cf_grads[&name].iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        for (&i, &num) in idx.iter().zip(&numeric) {
            rep.max_rel_err = rep.max_rel_err.max(rel_err(g[i], num));
            rep.max_abs_err = rep.max_abs_err.max((g[i] - num).abs());
        }
        tensors.push(rep);
    }
    Ok(GradCheckReport { cf_enabled: cfg.loss.cf_enabled, loss: parts.total(), tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_harness() {
        for x in [-3.0, 0.5, 1.0, 10.0] {
            assert!(quadratic_self_test(x, 1e-5) < 1e-6);
        }
    }

    #[test]
    fn sampled_check_passes_and_flags_disabled_cf() {
        let cfg = GradCheckConfig { entries_per_tensor: Some(3), ..GradCheckConfig::default() };
        let rep = grad_check(&cfg).unwrap();
        assert!(rep.passed(1e-3), "{}", rep.table());
        assert!(rep.tensors.iter().all(|t| !t.cf_zero()));

        let off = GradCheckConfig { loss: LossConfig { cf_enabled: false, ..cfg.loss }, ..cfg };
        let rep = grad_check(&off).unwrap();
        assert!(rep.passed(1e-3), "{}", rep.table());
        assert!(rep.tensors.iter().all(TensorReport::cf_zero));
        assert!(rep.table().contains("cf-zero"));
    }
}
