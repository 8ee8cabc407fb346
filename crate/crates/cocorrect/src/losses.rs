//! Loss terms for the three training phases.
//!
//! All losses are batch means. Every term is differentiable along two routes:
//! through the network output (pre-softmax logits) and, for the soft-label
//! terms, through the per-sample label logits whose softmax produces the
//! label distribution. Gradients are closed-form; the test suite checks them
//! against central finite differences in f64.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Floor applied inside every logarithm so fully-confident softmax outputs
/// cannot produce -inf.
pub const LOG_EPS: f64 = 1e-12;

/// Weights of the compatibility and entropy terms in the correction-phase
/// composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

fn ln_clamped(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

fn check_rows(name: &str, rows: usize, expect: usize) -> Result<()> {
    if rows != expect {
        return Err(Error::Shape(format!(
            "{name}: got {rows} rows, expected {expect}"
        )));
    }
    Ok(())
}

/// Per-sample cross-entropy against hard class indices.
pub fn ce_hard_per_sample(pred: ArrayView2<f64>, targets: &[u16]) -> Result<Array1<f64>> {
    check_rows("ce_hard", pred.nrows(), targets.len())?;
    let mut out = Array1::zeros(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let p = pred[[i, t as usize]];
        if p <= LOG_EPS {
            log::debug!("ce_hard: clamped zero probability at sample {i}, class {t}");
        }
        out[i] = -ln_clamped(p);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch.
pub fn ce_hard(pred: ArrayView2<f64>, targets: &[u16]) -> Result<f64> {
    Ok(ce_hard_per_sample(pred, targets)?.mean().unwrap_or(0.0))
}

/// Per-sample KL(pred ‖ yd): the divergence taken in the flipped direction,
/// so its gradient with respect to the label logits stays informative.
pub fn kl_flipped_per_sample(pred: ArrayView2<f64>, yd: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_rows("kl_flipped", pred.nrows(), yd.nrows())?;
    let mut out = Array1::zeros(pred.nrows());
    for (i, (p_row, q_row)) in pred.rows().into_iter().zip(yd.rows()).enumerate() {
        let mut acc = 0.0;
        for (&p, &q) in p_row.iter().zip(q_row.iter()) {
            if p > 0.0 {
                acc += p * (ln_clamped(p) - ln_clamped(q));
            }
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Batch-mean flipped KL divergence.
pub fn kl_flipped(pred: ArrayView2<f64>, yd: ArrayView2<f64>) -> Result<f64> {
    Ok(kl_flipped_per_sample(pred, yd)?.mean().unwrap_or(0.0))
}

/// Per-sample compatibility loss: cross-entropy of the label distribution
/// against the original (possibly noisy) one-hot annotation. Anchors the
/// corrected labels to the observed ones.
pub fn compat_per_sample(
    noisy_onehot: ArrayView2<f64>,
    yd: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    check_rows("compat_loss", noisy_onehot.nrows(), yd.nrows())?;
    let mut out = Array1::zeros(yd.nrows());
    for (i, (y_row, q_row)) in noisy_onehot.rows().into_iter().zip(yd.rows()).enumerate() {
        let mut acc = 0.0;
        for (&y, &q) in y_row.iter().zip(q_row.iter()) {
            if y != 0.0 {
                acc -= y * ln_clamped(q);
            }
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Batch-mean compatibility loss.
pub fn compat_loss(noisy_onehot: ArrayView2<f64>, yd: ArrayView2<f64>) -> Result<f64> {
    Ok(compat_per_sample(noisy_onehot, yd)?.mean().unwrap_or(0.0))
}

/// Per-sample prediction entropy, with 0·log 0 = 0.
pub fn entropy_per_sample(pred: ArrayView2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(pred.nrows());
    for (i, row) in pred.rows().into_iter().enumerate() {
        let mut acc = 0.0;
        for &p in row.iter() {
            if p > 0.0 {
                acc -= p * p.ln();
            }
        }
        out[i] = acc;
    }
    out
}

/// Batch-mean prediction entropy; lies in [0, log c].
pub fn entropy_loss(pred: ArrayView2<f64>) -> f64 {
    entropy_per_sample(pred).mean().unwrap_or(0.0)
}

/// The correction-phase composite: flipped KL + alpha·compatibility +
/// beta·entropy, all batch means.
pub fn stage3_loss(
    pred: ArrayView2<f64>,
    yd: ArrayView2<f64>,
    noisy_onehot: ArrayView2<f64>,
    w: LossWeights,
) -> Result<f64> {
    Ok(kl_flipped(pred, yd)?
        + w.alpha * compat_loss(noisy_onehot, yd)?
        + w.beta * entropy_loss(pred))
}

/// Gradient of the batch-mean composite with respect to the label logits
/// (the pre-softmax variables behind `yd`). The entropy term does not touch
/// the label distribution, so it contributes nothing here. Row i is
/// (1/b)·[(yd_i − pred_i) + alpha·(yd_i − onehot_i)].
pub fn stage3_grad_label_logits(
    pred: ArrayView2<f64>,
    yd: ArrayView2<f64>,
    noisy_onehot: ArrayView2<f64>,
    w: LossWeights,
) -> Result<Array2<f64>> {
    check_rows("stage3_grad_label_logits", pred.nrows(), yd.nrows())?;
    check_rows(
        "stage3_grad_label_logits",
        noisy_onehot.nrows(),
        yd.nrows(),
    )?;
    let b = pred.nrows() as f64;
    let mut out = Array2::zeros(pred.raw_dim());
    for i in 0..pred.nrows() {
        for j in 0..pred.ncols() {
            let q = yd[[i, j]];
            out[[i, j]] = ((q - pred[[i, j]]) + w.alpha * (q - noisy_onehot[[i, j]])) / b;
        }
    }
    Ok(out)
}

/// Gradient of `sum_i row_weight_i · (kl_i + beta·entropy_i)` with respect
/// to the network logits. `row_weight` carries the selection mask and the
/// normalization (e.g. 1/|selected| on selected rows, 0 elsewhere), so the
/// same routine serves both full-batch and selected-subset objectives.
/// The compatibility term has no network dependence and is absent here.
pub fn soft_grad_logits(
    pred: ArrayView2<f64>,
    yd: ArrayView2<f64>,
    beta: f64,
    row_weight: &[f64],
) -> Result<Array2<f64>> {
    check_rows("soft_grad_logits", pred.nrows(), yd.nrows())?;
    check_rows("soft_grad_logits", pred.nrows(), row_weight.len())?;
    let mut out = Array2::zeros(pred.raw_dim());
    for i in 0..pred.nrows() {
        let wi = row_weight[i];
        if wi == 0.0 {
            continue;
        }
        // dl/dp_k for l = KL(p ‖ q) + beta·H(p)
        let mut dot = 0.0;
        let mut g = vec![0.0f64; pred.ncols()];
        for j in 0..pred.ncols() {
            let p = pred[[i, j]];
            let lp = ln_clamped(p);
            let lq = ln_clamped(yd[[i, j]]);
            g[j] = (lp - lq + 1.0) - beta * (lp + 1.0);
            dot += g[j] * p;
        }
        // back through the softmax: dz_k = p_k (g_k − Σ_j g_j p_j)
        for j in 0..pred.ncols() {
            out[[i, j]] = wi * pred[[i, j]] * (g[j] - dot);
        }
    }
    Ok(out)
}

/// Gradient of `sum_i row_weight_i · ce(pred_i, target_i)` with respect to
/// the network logits: the usual softmax-CE form, masked per row.
pub fn ce_grad_logits(
    pred: ArrayView2<f64>,
    targets: &[u16],
    row_weight: &[f64],
) -> Result<Array2<f64>> {
    check_rows("ce_grad_logits", pred.nrows(), targets.len())?;
    check_rows("ce_grad_logits", pred.nrows(), row_weight.len())?;
    let mut out = Array2::zeros(pred.raw_dim());
    for i in 0..pred.nrows() {
        let wi = row_weight[i];
        if wi == 0.0 {
            continue;
        }
        for j in 0..pred.ncols() {
            let y = if j == targets[i] as usize { 1.0 } else { 0.0 };
            out[[i, j]] = wi * (pred[[i, j]] - y);
        }
    }
    Ok(out)
}
