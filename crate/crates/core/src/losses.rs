//! Cross-entropy, NT-Xent contrastive loss and their weighted total.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::taxonomy::PROB_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_basic: f64,
    pub lambda_cl: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_basic: 1.0,
            lambda_cl: 0.1,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        for (name, v) in [("lambda_basic", self.lambda_basic), ("lambda_cl", self.lambda_cl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_targets(probs: ArrayView2<f64>, targets: &[usize]) -> Result<()> {
    if probs.nrows() != targets.len() {
        return Err(Error::LengthMismatch {
            left: probs.nrows(),
            right: targets.len(),
        });
    }
    let k = probs.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::LabelOutOfRange { label: t, classes: k });
    }
    Ok(())
}

/// Mean of `-ln(p[i, t_i] + 1e-12)` over the batch; 0 for an empty batch.
pub fn cross_entropy(probs: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    check_targets(probs, targets)?;
    for row in probs.rows() {
        crate::taxonomy::check_distribution(row.as_slice().unwrap_or(&row.to_vec()), 1e-6)?;
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -(probs[[i, t]] + PROB_FLOOR).ln())
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Gradient of [`cross_entropy`] w.r.t. the logits that produced `probs`
/// by softmax. Exact including the floor term.
pub fn cross_entropy_logit_grad(probs: ArrayView2<f64>, targets: &[usize]) -> Array2<f64> {
    let mut grad = Array2::zeros(probs.dim());
    if targets.is_empty() {
        return grad;
    }
    let n = targets.len() as f64;
    for (i, &t) in targets.iter().enumerate() {
        let pt = probs[[i, t]];
        let scale = pt / (pt + PROB_FLOOR) / n;
        for j in 0..probs.ncols() {
            let delta = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = scale * (probs[[i, j]] - delta);
        }
    }
    grad
}

fn l2_normalize(z: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(PROB_FLOOR);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// NT-Xent over the `2B` views with analytic gradients w.r.t. `z1`, `z2`.
///
/// View `i` has its pair as the positive and the other `2B - 2` views as
/// negatives. The loss is the mean over all `2B` anchors.
pub fn nt_xent_with_grad(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z1.dim() != z2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "view embeddings {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    let b = z1.nrows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let z = concatenate(Axis(0), &[z1, z2]).expect("equal widths");
    let (n, norms) = l2_normalize(&z);
    let m = 2 * b;
    let sim = n.dot(&n.t()) / temperature;

    let mut loss = 0.0;
    // g[i][k] = dL/dsim[i][k]
    let mut g = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        let pos = (i + b) % m;
        let row = sim.row(i);
        let max = (0..m)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        loss += -row[pos] + max + denom.ln();
        for k in (0..m).filter(|&k| k != i) {
            let soft = (row[k] - max).exp() / denom;
            g[[i, k]] = (soft - if k == pos { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    loss /= m as f64;

    // sim = n n^T / tau, so dL/dn = (g + g^T) n / tau
    let d_n = (&g + &g.t()).dot(&n) / temperature;
    let mut d_z = Array2::zeros(z.dim());
    for i in 0..m {
        let ni = n.row(i);
        let dni = d_n.row(i);
        let proj = ni.dot(&dni);
        let mut out = d_z.row_mut(i);
        for j in 0..z.ncols() {
            out[j] = (dni[j] - ni[j] * proj) / norms[i];
        }
    }
    let d1 = d_z.slice(s![..b, ..]).to_owned();
    let d2 = d_z.slice(s![b.., ..]).to_owned();
    Ok((loss, d1, d2))
}

pub fn contrastive_nt_xent(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    temperature: f64,
) -> Result<f64> {
    nt_xent_with_grad(z1, z2, temperature).map(|(l, _, _)| l)
}

/// `L_ce + lambda_basic * L_basic + lambda_cl * L_CL`.
pub fn total_loss(l_ce: f64, l_basic: f64, l_cl: f64, w: &LossWeights) -> f64 {
    l_ce + w.lambda_basic * l_basic + w.lambda_cl * l_cl
}
