//! Agreement and small-loss sample selection.

use ndarray::ArrayView2;

use crate::config::SelectionMode;
use crate::util::argmax;

/// Batch positions where the two prediction matrices share their argmax.
/// Ties inside a row resolve to the lowest class index for both networks,
/// so a tie cannot split the pair.
pub fn agreement_set(pred1: ArrayView2<f64>, pred2: ArrayView2<f64>) -> Vec<usize> {
    assert_eq!(pred1.shape(), pred2.shape(), "prediction shape mismatch");
    (0..pred1.nrows())
        .filter(|&i| argmax(pred1.row(i)) == argmax(pred2.row(i)))
        .collect()
}

/// Keep the ceil(rate * n) smallest-loss entries of `losses` (parallel to
/// `positions`), ascending, ties by position. Returns positions.
pub fn select_small_loss(positions: &[usize], losses: &[f64], rate: f64) -> Vec<usize> {
    assert_eq!(positions.len(), losses.len());
    if positions.is_empty() {
        return Vec::new();
    }
    let keep = ((rate * positions.len() as f64).ceil() as usize).min(positions.len());
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        losses[a]
            .partial_cmp(&losses[b])
            .expect("losses are finite")
            .then(positions[a].cmp(&positions[b]))
    });
    let mut out: Vec<usize> = order[..keep].iter().map(|&i| positions[i]).collect();
    out.sort_unstable();
    out
}

/// Resolve the per-network training subsets from both loss vectors.
/// Returns (subset for net1, subset for net2) as batch positions.
pub fn training_subsets(
    positions: &[usize],
    losses1: &[f64],
    losses2: &[f64],
    rate: f64,
    mode: SelectionMode,
) -> (Vec<usize>, Vec<usize>) {
    match mode {
        SelectionMode::Peer => (
            select_small_loss(positions, losses2, rate),
            select_small_loss(positions, losses1, rate),
        ),
        SelectionMode::Own => (
            select_small_loss(positions, losses1, rate),
            select_small_loss(positions, losses2, rate),
        ),
        SelectionMode::Intersection => {
            let a = select_small_loss(positions, losses1, rate);
            let b = select_small_loss(positions, losses2, rate);
            let bset: std::collections::HashSet<usize> = b.into_iter().collect();
            let both: Vec<usize> = a.into_iter().filter(|p| bset.contains(p)).collect();
            (both.clone(), both)
        }
    }
}
