//! Label-correction curriculum from density peaks in feature space.
//!
//! After warm-up, every train sample is projected by both networks'
//! penultimate layers; the concatenated vectors are PCA-reduced. Within
//! each observed class, pairwise distances give a cutoff at the k-th
//! percentile, integer densities count neighbors below the cutoff, and
//! each sample's peak distance is the distance to its nearest
//! higher-density neighbor (row maximum for the density peaks themselves).
//! Ranking by that distance, ascending, splits the class into three equal
//! tiers: cluster cores unlock for correction first, fringes last. The
//! plan is computed once and never rebuilt.

use ndarray::{Array1, Array2, ArrayView2};
use std::io::Write;
use std::path::Path;

use crate::data::{NoisyDataset, Split};
use crate::error::{Error, Result};
use crate::nn::SequentialNet;

/// Per-class distance matrices switch to a row-chunked two-pass path above
/// this size so memory stays O(n·block) instead of O(n²).
const DENSE_MATRIX_LIMIT: usize = 3000;

#[derive(Debug, Clone)]
pub struct CurriculumPlan {
    /// Train ids in ascending order; all other vectors align with this.
    pub ids: Vec<usize>,
    /// Tier 1..=3 per sample (1 unlocks first).
    pub tier: Vec<u8>,
    /// Observed class each sample was grouped under.
    pub class_of: Vec<u16>,
    /// Neighbor counts below the class cutoff.
    pub density: Vec<u32>,
    /// Distance to the nearest higher-density sample (row max for peaks).
    pub peak_distance: Vec<f64>,
    /// Cutoff distance per class.
    pub cutoff: Vec<f64>,
    /// Reduced feature matrix, kept for audits.
    pub features: Array2<f64>,
    /// Fraction of variance the PCA projection retains.
    pub variance_captured: f64,
    /// Epoch at which each tier unlocks (strictly increasing).
    pub unlock_epoch: [usize; 3],
}

impl CurriculumPlan {
    /// Ids whose tier unlocks exactly at `epoch`.
    pub fn unlocking_at(&self, epoch: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (t, &ue) in self.unlock_epoch.iter().enumerate() {
            if ue == epoch {
                for (i, &tier) in self.tier.iter().enumerate() {
                    if tier as usize == t + 1 {
                        out.push(self.ids[i]);
                    }
                }
            }
        }
        out
    }

    pub fn tier_sizes(&self) -> [usize; 3] {
        let mut sizes = [0usize; 3];
        for &t in &self.tier {
            sizes[t as usize - 1] += 1;
        }
        sizes
    }

    /// Audit export: id, class, density, peak distance, tier, unlock epoch.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,class,s,eps,tier,unlock_epoch")?;
        for i in 0..self.ids.len() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                self.ids[i],
                self.class_of[i],
                self.density[i],
                self.peak_distance[i],
                self.tier[i],
                self.unlock_epoch[self.tier[i] as usize - 1]
            )?;
        }
        Ok(())
    }
}

/// Euclidean distance matrix of a feature block: symmetric, zero diagonal.
pub fn distance_matrix(features: ArrayView2<f64>) -> Array2<f64> {
    let n = features.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = row_distance(features, i, j);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn row_distance(features: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let (a, b) = (features.row(i), features.row(j));
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Value ranked at ceil(k% · M) among the ascending off-diagonal entries,
/// counting each unordered pair once.
pub fn cutoff_distance(d: ArrayView2<f64>, k_percent: f64) -> Result<f64> {
    let n = d.nrows();
    let mut entries = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            entries.push(d[[i, j]]);
        }
    }
    cutoff_from_entries(entries, k_percent)
}

fn cutoff_from_entries(mut entries: Vec<f64>, k_percent: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&k_percent) || k_percent == 0.0 {
        return Err(Error::config(format!(
            "cutoff percentile must lie in (0, 100], got {k_percent}"
        )));
    }
    if entries.is_empty() {
        return Err(Error::config(
            "cutoff needs at least one sample pair".to_string(),
        ));
    }
    entries.sort_unstable_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let m = entries.len();
    let rank = ((k_percent / 100.0) * m as f64).ceil() as usize;
    Ok(entries[rank.clamp(1, m) - 1])
}

/// Neighbor counts strictly below the cutoff (diagonal excluded).
pub fn densities(d: ArrayView2<f64>, cutoff: f64) -> Vec<u32> {
    let n = d.nrows();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && d[[i, j]] < cutoff)
                .count() as u32
        })
        .collect()
}

/// Distance to the nearest strictly-higher-density sample; samples with no
/// denser neighbor (the density peaks) take their row maximum.
pub fn peak_distances(d: ArrayView2<f64>, density: &[u32]) -> Vec<f64> {
    let n = d.nrows();
    (0..n)
        .map(|i| {
            let mut nearest = f64::INFINITY;
            let mut row_max = 0.0f64;
            for j in 0..n {
                if j == i {
                    continue;
                }
                row_max = row_max.max(d[[i, j]]);
                if density[j] > density[i] {
                    nearest = nearest.min(d[[i, j]]);
                }
            }
            if nearest.is_finite() {
                nearest
            } else {
                row_max
            }
        })
        .collect()
}

/// Chunked equivalent of (cutoff, densities, peak_distances) that never
/// materializes the full matrix. Produces bit-identical results to the
/// dense path: per-pair arithmetic and the sort multiset are the same.
fn class_stats_chunked(
    features: ArrayView2<f64>,
    k_percent: f64,
) -> Result<(f64, Vec<u32>, Vec<f64>)> {
    let n = features.nrows();
    let mut entries = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            entries.push(row_distance(features, i, j));
        }
    }
    let cutoff = cutoff_from_entries(entries, k_percent)?;

    let mut density = vec![0u32; n];
    for i in 0..n {
        for j in i + 1..n {
            if row_distance(features, i, j) < cutoff {
                density[i] += 1;
                density[j] += 1;
            }
        }
    }
    let eps = (0..n)
        .map(|i| {
            let mut nearest = f64::INFINITY;
            let mut row_max = 0.0f64;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dij = row_distance(features, i, j);
                row_max = row_max.max(dij);
                if density[j] > density[i] {
                    nearest = nearest.min(dij);
                }
            }
            if nearest.is_finite() {
                nearest
            } else {
                row_max
            }
        })
        .collect();
    Ok((cutoff, density, eps))
}

/// Rank a class into three tiers: density peaks are pinned ahead of the
/// ascending peak-distance order, then the sequence splits into three
/// near-equal consecutive groups (sizes differ by at most one, larger
/// first).
pub fn assign_tiers(eps: &[f64], density: &[u32]) -> Vec<u8> {
    let n = eps.len();
    let max_density = density.iter().copied().max().unwrap_or(0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let peak_a = density[a] == max_density;
        let peak_b = density[b] == max_density;
        peak_b
            .cmp(&peak_a)
            .then(eps[a].partial_cmp(&eps[b]).expect("finite"))
            .then(a.cmp(&b))
    });
    let base = n / 3;
    let rem = n % 3;
    let sizes = [
        base + usize::from(rem > 0),
        base + usize::from(rem > 1),
        base,
    ];
    let mut tiers = vec![0u8; n];
    let mut cursor = 0;
    for (t, &size) in sizes.iter().enumerate() {
        for &idx in &order[cursor..cursor + size] {
            tiers[idx] = t as u8 + 1;
        }
        cursor += size;
    }
    tiers
}

/// PCA by eigendecomposition of the covariance matrix (cyclic Jacobi).
/// Component signs are pinned so the projection is reproducible. Returns
/// the projected data and the captured-variance fraction.
pub fn pca_reduce(x: ArrayView2<f64>, dim: usize) -> Result<(Array2<f64>, f64)> {
    let (n, d) = (x.nrows(), x.ncols());
    if dim > d {
        return Err(Error::config(format!(
            "pca dimension {dim} exceeds feature width {d}"
        )));
    }
    if n < 2 {
        return Err(Error::config("pca needs at least 2 samples".to_string()));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = &x - &mean.broadcast((n, d)).expect("broadcast");
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    let (eigvals, eigvecs) = jacobi_eigh(cov)?;
    // order components by eigenvalue, descending; ties by index
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigvals[b]
            .partial_cmp(&eigvals[a])
            .expect("finite")
            .then(a.cmp(&b))
    });

    let mut components = Array2::zeros((d, dim));
    for (c, &src) in order[..dim].iter().enumerate() {
        let mut col = eigvecs.column(src).to_owned();
        // pin sign: largest-magnitude coordinate positive
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        components.column_mut(c).assign(&col);
    }

    let total: f64 = eigvals.iter().map(|v| v.max(0.0)).sum();
    let kept: f64 = order[..dim].iter().map(|&i| eigvals[i].max(0.0)).sum();
    let ratio = if total > 0.0 { kept / total } else { 1.0 };
    Ok((centered.dot(&components), ratio))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigh(mut a: Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape("jacobi_eigh needs a square matrix".to_string()));
    }
    let mut v = Array2::eye(n);
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * frob.max(1e-300);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let (app, aqq) = (a[[p, p]], a[[q, q]]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_iter((0..n).map(|i| a[[i, i]]));
    Ok((eig, v))
}

/// Penultimate features from both networks over the train split (no
/// augmentation, ascending id order), concatenated and PCA-reduced.
pub fn extract_features(
    net1: &SequentialNet,
    net2: &SequentialNet,
    ds: &NoisyDataset,
    pca_dim: usize,
    batch_size: usize,
) -> Result<(Vec<usize>, Array2<f64>, f64)> {
    let ids = ds.ids(Split::Train);
    let width = net1.feature_dim() + net2.feature_dim();
    if pca_dim > width {
        return Err(Error::config(format!(
            "pca dimension {pca_dim} exceeds concatenated width {width}"
        )));
    }
    let mut concat = Array2::zeros((ids.len(), width));
    let mut cursor = 0;
    for batch in ds.eval_batches(Split::Train, batch_size) {
        let (f1, f2) = rayon::join(
            || net1.features(batch.images.view()),
            || net2.features(batch.images.view()),
        );
        for bi in 0..batch.ids.len() {
            for (j, &val) in f1.row(bi).iter().enumerate() {
                concat[[cursor + bi, j]] = val as f64;
            }
            for (j, &val) in f2.row(bi).iter().enumerate() {
                concat[[cursor + bi, net1.feature_dim() + j]] = val as f64;
            }
        }
        cursor += batch.ids.len();
    }
    let (reduced, variance) = pca_reduce(concat.view(), pca_dim)?;
    Ok((ids, reduced, variance))
}

/// Build the three-tier plan: per observed class, distances → cutoff →
/// densities → peak distances → tiers; unlock epochs spread evenly over
/// the correction stage `stage3_range` (half-open).
pub fn build_plan(
    net1: &SequentialNet,
    net2: &SequentialNet,
    ds: &NoisyDataset,
    k_percent: f64,
    pca_dim: usize,
    batch_size: usize,
    stage3_range: (usize, usize),
) -> Result<CurriculumPlan> {
    let (ids, features, variance_captured) =
        extract_features(net1, net2, ds, pca_dim, batch_size)?;
    log::info!(
        "curriculum features: {} samples x {} dims, variance captured {:.4}",
        features.nrows(),
        features.ncols(),
        variance_captured
    );

    let noisy = ds.noisy_labels();
    let n = ids.len();
    let mut tier = vec![0u8; n];
    let mut density = vec![0u32; n];
    let mut eps = vec![0.0f64; n];
    let mut class_of = vec![0u16; n];
    let mut cutoff = vec![0.0f64; ds.num_classes()];

    for class in 0..ds.num_classes() as u16 {
        let members: Vec<usize> = (0..n).filter(|&i| noisy[ids[i]] == class).collect();
        for &m in &members {
            class_of[m] = class;
        }
        if members.len() < 3 {
            log::warn!(
                "class {class} has {} samples; all assigned to tier 1",
                members.len()
            );
            for &m in &members {
                tier[m] = 1;
                density[m] = 0;
                eps[m] = 0.0;
            }
            continue;
        }
        let mut block = Array2::zeros((members.len(), features.ncols()));
        for (bi, &m) in members.iter().enumerate() {
            block.row_mut(bi).assign(&features.row(m));
        }
        let (dc, s, e) = if members.len() <= DENSE_MATRIX_LIMIT {
            let d = distance_matrix(block.view());
            let dc = cutoff_distance(d.view(), k_percent)?;
            let s = densities(d.view(), dc);
            let e = peak_distances(d.view(), &s);
            (dc, s, e)
        } else {
            class_stats_chunked(block.view(), k_percent)?
        };
        cutoff[class as usize] = dc;
        let tiers = assign_tiers(&e, &s);
        for (bi, &m) in members.iter().enumerate() {
            density[m] = s[bi];
            eps[m] = e[bi];
            tier[m] = tiers[bi];
        }
    }

    let (s3_start, s3_end) = stage3_range;
    let len = s3_end.saturating_sub(s3_start);
    if len < 3 {
        return Err(Error::config(format!(
            "correction stage needs at least 3 epochs for 3 tiers, got {len}"
        )));
    }
    let unlock_epoch = [
        s3_start,
        s3_start + len.div_ceil(3),
        s3_start + (2 * len).div_ceil(3),
    ];

    Ok(CurriculumPlan {
        ids,
        tier,
        class_of,
        density,
        peak_distance: eps,
        cutoff,
        features,
        variance_captured,
        unlock_epoch,
    })
}
