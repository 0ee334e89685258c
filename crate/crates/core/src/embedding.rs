//! Layout-modulated embeddings: all Frobenius products between descriptors
//! and raw feature channels, descriptor-major.

use crate::error::{Error, Result};
use crate::features::{Branch, ModelConfig, RawFeatures};
use crate::imaging::Image;
use crate::layout::{DropoutRng, LayoutDescriptors};
use crate::model::{forward_branch, BranchParams};

/// Smallest norm [`normalize`] accepts.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedEmbedding {
    pub data: Vec<f64>,
    pub normalized: bool,
}

impl ModulatedEmbedding {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `f[m*C + j] = <p_m, r_j>`.
pub fn modulate(p: &LayoutDescriptors, r: &RawFeatures) -> Result<ModulatedEmbedding> {
    if p.grid() != r.grid() {
        return Err(Error::shape(format!(
            "descriptor grid {:?} does not match feature grid {:?}",
            p.grid(),
            r.grid()
        )));
    }
    let (k, c) = (p.count(), r.channels());
    let cells = r.grid().0 * r.grid().1;
    let mut data = vec![0.0; k * c];
    crate::tensor::gemm(k, cells, c, &p.data.data, false, &r.data.data, true, &mut data, false);
    Ok(ModulatedEmbedding { data, normalized: false })
}

pub fn normalize(f: &ModulatedEmbedding) -> Result<ModulatedEmbedding> {
    let n = f.norm();
    if !(n > MIN_NORM) {
        return Err(Error::ZeroNorm(n));
    }
    Ok(ModulatedEmbedding { data: f.data.iter().map(|v| v / n).collect(), normalized: true })
}

/// Euclidean distance.
pub fn distance(a: &ModulatedEmbedding, b: &ModulatedEmbedding) -> Result<f64> {
    if a.data.len() != b.data.len() {
        return Err(Error::shape(format!("embedding lengths differ: {} vs {}", a.data.len(), b.data.len())));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Backbone, extractor, modulation and (per config) normalization for one image.
pub fn embed_image(
    img: &Image,
    params: &BranchParams,
    cfg: &ModelConfig,
    branch: Branch,
    rng: DropoutRng<'_>,
) -> Result<ModulatedEmbedding> {
    let fwd = forward_branch(params, "branch", cfg, branch, img, None, rng)?;
    Ok(fwd.embedding())
}
