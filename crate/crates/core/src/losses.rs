//! Soft-margin triplet loss, counterfactual loss and their batch reductions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{distance, ModulatedEmbedding};
use crate::error::{Error, Result};
use crate::layout::LayoutDescriptors;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Triplet sharpness.
    pub alpha: f64,
    pub beta_ground: f64,
    pub beta_aerial: f64,
    pub cf_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 10.0, beta_ground: 5.0, beta_aerial: 5.0, cf_enabled: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta_ground > 0.0 && self.beta_aerial > 0.0) {
            return Err(Error::Config(format!(
                "alpha and betas must be positive (alpha={}, beta_ground={}, beta_aerial={})",
                self.alpha, self.beta_ground, self.beta_aerial
            )));
        }
        Ok(())
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub cf_ground: f64,
    pub cf_aerial: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.triplet + self.cf_ground + self.cf_aerial
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn triplet_loss(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    softplus(alpha * (d_pos - d_neg))
}

/// Partial derivative of [`triplet_loss`] with respect to `d_pos`
/// (the derivative with respect to `d_neg` is its negation).
pub fn triplet_loss_grad(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    alpha * sigmoid(alpha * (d_pos - d_neg))
}

pub fn counterfactual_loss_from_distance(d: f64, beta: f64) -> f64 {
    softplus(-beta * d)
}

pub fn counterfactual_loss_grad(d: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * d)
}

pub fn counterfactual_loss(f: &ModulatedEmbedding, f_hat: &ModulatedEmbedding, beta: f64) -> Result<f64> {
    if f.normalized != f_hat.normalized {
        return Err(Error::invalid("counterfactual pair mixes normalized and raw embeddings"));
    }
    Ok(counterfactual_loss_from_distance(distance(f, f_hat)?, beta))
}

/// Mean triplet loss over the `2n(n-1)` directed triplets encoded by an
/// `n x n` matrix `dist[i*n + j] = d(ground_i, aerial_j)`.
pub fn batch_triplet_from_distances(dist: &[f64], n: usize, alpha: f64) -> f64 {
    let mut sum = 0.0;
    for m in 0..n {
        let pos = dist[m * n + m];
        for k in 0..n {
            if k == m {
                continue;
            }
            // ground anchor, aerial negative; aerial anchor, ground negative
            sum += triplet_loss(pos, dist[m * n + k], alpha);
            sum += triplet_loss(pos, dist[k * n + m], alpha);
        }
    }
    sum / (2 * n * (n - 1)) as f64
}

pub fn batch_triplet_grad_from_distances(dist: &[f64], n: usize, alpha: f64) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    let scale = 1.0 / (2 * n * (n - 1)) as f64;
    for m in 0..n {
        let pos = dist[m * n + m];
        for k in 0..n {
            if k == m {
                continue;
            }
            let a = triplet_loss_grad(pos, dist[m * n + k], alpha) * scale;
            g[m * n + m] += a;
            g[m * n + k] -= a;
            let b = triplet_loss_grad(pos, dist[k * n + m], alpha) * scale;
            g[m * n + m] += b;
            g[k * n + m] -= b;
        }
    }
    g
}

/// Exhaustive in-batch triplet loss; `ground[i]` matches `aerial[i]`.
pub fn batch_triplet_loss(
    ground: &[ModulatedEmbedding],
    aerial: &[ModulatedEmbedding],
    alpha: f64,
) -> Result<f64> {
    let n = ground.len();
    if aerial.len() != n {
        return Err(Error::shape(format!("{} ground vs {} aerial embeddings", n, aerial.len())));
    }
    if n < 2 {
        return Err(Error::invalid(format!("batch triplet loss needs at least 2 pairs, got {n}")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = distance(&ground[i], &aerial[j])?;
        }
    }
    Ok(batch_triplet_from_distances(&dist, n, alpha))
}

/// Imaginary descriptors with entries i.i.d. uniform on `[-1, 1]`.
pub fn sample_imaginary_descriptors<R: Rng + ?Sized>(
    k: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> LayoutDescriptors {
    let data = (0..k * h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
    LayoutDescriptors { data: Tensor { shape: vec![k, h, w], data } }
}
