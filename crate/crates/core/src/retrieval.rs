//! Distance matrices and recall metrics for ground-to-aerial retrieval.

use rayon::prelude::*;

use crate::embedding::{distance, ModulatedEmbedding};
use crate::error::{Error, Result};

/// Rows are ground queries, columns aerial references; query `i` matches reference `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("distance entries must be finite and nonnegative, found {v}")));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// 0-based rank of the true reference for query `i`: the number of
    /// references that sort strictly before it (ties go to the lower index).
    pub fn rank_of_truth(&self, i: usize) -> usize {
        let row = self.row(i);
        let t = row[i];
        row.iter().enumerate().filter(|&(j, &d)| d < t || (d == t && j < i)).count()
    }
}

pub fn distance_matrix(ground: &[ModulatedEmbedding], aerial: &[ModulatedEmbedding]) -> Result<DistanceMatrix> {
    let cols = aerial.len();
    let rows: Vec<Vec<f64>> = ground
        .par_iter()
        .map(|g| aerial.iter().map(|a| distance(g, a)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(DistanceMatrix { rows: ground.len(), cols, data: rows.concat() })
}

fn check_queries(d: &DistanceMatrix) -> Result<()> {
    if d.rows == 0 || d.rows > d.cols {
        return Err(Error::invalid(format!(
            "need 1..={} queries with a matching reference each, got {}",
            d.cols, d.rows
        )));
    }
    Ok(())
}

pub fn recall_at_k(d: &DistanceMatrix, k: usize) -> Result<f64> {
    check_queries(d)?;
    if k == 0 || k > d.cols {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", d.cols)));
    }
    let hits = (0..d.rows).filter(|&i| d.rank_of_truth(i) < k).count();
    Ok(hits as f64 / d.rows as f64)
}

/// `ceil(pct / 100 * M)`.
pub fn percent_to_k(pct: f64, references: usize) -> Result<usize> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::invalid(format!("percentage must be in (0, 100], got {pct}")));
    }
    // guard against 0.01 * 200 landing a hair above 2
    let x = pct / 100.0 * references as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil() as usize;
    Ok(k.clamp(1, references))
}

pub fn recall_at_percent(d: &DistanceMatrix, pct: f64) -> Result<f64> {
    recall_at_k(d, percent_to_k(pct, d.cols)?)
}

/// The four standard recalls.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r1_percent: f64,
}

impl Recalls {
    pub fn compute(d: &DistanceMatrix) -> Result<Self> {
        let at = |k: usize| recall_at_k(d, k.min(d.cols));
        Ok(Recalls { r1: at(1)?, r5: at(5)?, r10: at(10)?, r1_percent: recall_at_percent(d, 1.0)? })
    }

    pub fn table(&self) -> String {
        format!(
            "metric  value\nR@1     {:.4}\nR@5     {:.4}\nR@10    {:.4}\nR@1%    {:.4}\n",
            self.r1, self.r5, self.r10, self.r1_percent
        )
    }

    pub fn csv(&self) -> String {
        format!("r1,r5,r10,r1_percent\n{},{},{},{}\n", self.r1, self.r5, self.r10, self.r1_percent)
    }
}
