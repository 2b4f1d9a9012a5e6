//! The full training objective on one batch and its parameter gradient.
//!
//! `L_basic` is taken over rows with a basic label (on the basic head),
//! `L_ce` over rows with a compound label (on the combined prediction) and
//! `L_CL` over all rows whose two augmented views are present.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::fusion_model::{FusionModel, FusionParams, Mode, OutputGrads};
use crate::losses::{cross_entropy_logit_grad, nt_xent_with_grad, total_loss, LossWeights};
use crate::taxonomy::PROB_FLOOR;

/// One batch of fused features. Views may be absent (no contrastive term).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub original: ArrayView2<'a, f64>,
    pub views: Option<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
    pub basic: &'a [Option<usize>],
    pub compound: &'a [Option<usize>],
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub basic: f64,
    pub ce: f64,
    pub cl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.basic.is_finite() && self.ce.is_finite() && self.cl.is_finite() && self.total.is_finite()
    }
}

fn labelled(labels: &[Option<usize>]) -> (Vec<usize>, Vec<usize>) {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|t| (i, t)))
        .unzip()
}

/// Mean floored cross-entropy over the selected rows, and its gradient
/// w.r.t. the logits of all rows (zero on unselected rows).
fn masked_ce(probs: &Array2<f64>, rows: &[usize], targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(probs.dim());
    if rows.is_empty() {
        return Ok((0.0, grad));
    }
    let k = probs.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::LabelOutOfRange { label: t, classes: k });
    }
    let sub = probs.select(ndarray::Axis(0), rows);
    let loss = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -(sub[[i, t]] + PROB_FLOOR).ln())
        .sum::<f64>()
        / rows.len() as f64;
    let sub_grad = cross_entropy_logit_grad(sub.view(), targets);
    for (i, &r) in rows.iter().enumerate() {
        grad.row_mut(r).assign(&sub_grad.row(i));
    }
    Ok((loss, grad))
}

/// Evaluates the objective and, when `with_grad`, its gradient.
pub fn loss_and_grad(
    model: &FusionModel,
    batch: &Batch<'_>,
    weights: &LossWeights,
    mode: &mut Mode<'_>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<FusionParams>)> {
    let n = batch.original.nrows();
    if batch.basic.len() != n || batch.compound.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: batch.basic.len().min(batch.compound.len()),
        });
    }
    let (out, cache) = model.forward_with_cache(batch.original, mode)?;

    let (basic_rows, basic_targets) = labelled(batch.basic);
    let (compound_rows, compound_targets) = labelled(batch.compound);
    let (l_basic, d_basic) = masked_ce(&out.basic_probs, &basic_rows, &basic_targets)?;
    let (l_ce, d_combined) = masked_ce(&out.combined_probs, &compound_rows, &compound_targets)?;

    let mut grads = with_grad.then(|| model.params.zeros_like());
    let mut l_cl = 0.0;
    if let Some((v1, v2)) = batch.views {
        if v1.nrows() != n || v2.nrows() != n {
            return Err(Error::BatchSizeMismatch {
                expected: n,
                actual: v1.nrows().min(v2.nrows()),
            });
        }
        if n >= 2 && weights.lambda_cl > 0.0 {
            let c1 = model.trunk_forward(v1, mode)?;
            let c2 = model.trunk_forward(v2, mode)?;
            let (l, d1, d2) = nt_xent_with_grad(
                c1.embedding.view(),
                c2.embedding.view(),
                weights.temperature,
            )?;
            l_cl = l;
            if let Some(g) = grads.as_mut() {
                model.trunk_backward(&c1, d1 * weights.lambda_cl, g);
                model.trunk_backward(&c2, d2 * weights.lambda_cl, g);
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        let upstream = OutputGrads {
            basic_logits: d_basic * weights.lambda_basic,
            combined_logits: d_combined,
        };
        model.backward(&out, &cache, &upstream, None, g);
    }

    let breakdown = LossBreakdown {
        basic: l_basic,
        ce: l_ce,
        cl: l_cl,
        total: total_loss(l_ce, l_basic, l_cl, weights),
    };
    Ok((breakdown, grads))
}

/// Relative gradient error per parameter: `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central finite differences of the evaluation-mode objective w.r.t.
/// every parameter, in [`FusionParams::tensors`] order.
pub fn numeric_gradient(
    model: &FusionModel,
    batch: &Batch<'_>,
    weights: &LossWeights,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let sizes: Vec<usize> = model.params.tensors().iter().map(|(_, _, v)| v.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let original = probe.params.tensors_mut()[t].1[i];
            probe.params.tensors_mut()[t].1[i] = original + step;
            let up = loss_and_grad(&probe, batch, weights, &mut Mode::Eval, false)?.0.total;
            probe.params.tensors_mut()[t].1[i] = original - step;
            let down = loss_and_grad(&probe, batch, weights, &mut Mode::Eval, false)?.0.total;
            probe.params.tensors_mut()[t].1[i] = original;
            out.push((up - down) / (2.0 * step));
        }
    }
    Ok(out)
}

pub fn flatten(params: &FusionParams) -> Vec<f64> {
    params
        .tensors()
        .into_iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .collect()
}
