//! Late fusion of per-model class probabilities.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub member_names: Vec<String>,
    pub weights: Vec<f64>,
}

impl EnsembleConfig {
    pub fn uniform(member_names: Vec<String>) -> Self {
        let weights = vec![1.0; member_names.len()];
        Self {
            member_names,
            weights,
        }
    }

    /// Weights scaled to sum to one.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalize_weights(&self.weights)
    }
}

fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Config(format!(
            "ensemble weights must be finite and >= 0, got {w}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Weighted arithmetic mean of row-stochastic matrices.
pub fn fuse_probs(members: &[ArrayView2<'_, f64>], weights: &[f64]) -> Result<Array2<f64>> {
    let first = members
        .first()
        .ok_or_else(|| Error::ShapeMismatch("ensemble has no members".into()))?;
    if weights.len() != members.len() {
        return Err(Error::LengthMismatch {
            left: members.len(),
            right: weights.len(),
        });
    }
    for m in members {
        if m.dim() != first.dim() {
            return Err(Error::ShapeMismatch(format!(
                "member shapes {:?} and {:?} differ",
                first.dim(),
                m.dim()
            )));
        }
        for row in m.rows() {
            crate::taxonomy::check_distribution(&row.to_vec(), 1e-6)?;
        }
    }
    let w = normalize_weights(weights)?;
    if members.len() == 1 {
        return Ok(first.to_owned());
    }
    let mut fused = Array2::zeros(first.dim());
    for (m, wi) in members.iter().zip(&w) {
        if *wi != 0.0 {
            fused.scaled_add(*wi, m);
        }
    }
    Ok(fused)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(probs: ArrayView2<'_, f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
