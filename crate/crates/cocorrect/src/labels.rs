//! Per-sample label logits and the gated correction step.
//!
//! Each training sample owns a row of logits, initialized to K times the
//! one-hot encoding of its observed label. The softmax of a row is that
//! sample's label distribution. During the correction phase the trainer
//! feeds back one gradient per network; the two are summed and applied by
//! gradient descent, but only to rows the curriculum has unlocked.

use ndarray::{Array2, ArrayView2};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{argmax, softmax_rows_f64};

/// Borrowed view of the store internals for checkpointing:
/// (logits, updatable, ever_changed, initial labels, K, lambda).
pub(crate) type StoreParts<'a> = (
    ArrayView2<'a, f64>,
    &'a [bool],
    &'a [bool],
    &'a [u16],
    f64,
    f64,
);

#[derive(Debug, Clone)]
pub struct LabelStore {
    logits: Array2<f64>,
    k_init: f64,
    lambda: f64,
    updatable: Vec<bool>,
    /// Rows whose argmax has ever left its initial class. Monotone by
    /// construction, unlike a recomputed disagreement count which could
    /// drop when a row flips back.
    ever_changed: Vec<bool>,
    init_labels: Vec<u16>,
    skipped_nonfinite: u64,
}

impl LabelStore {
    /// Build a store from observed labels: row i = k_init · onehot(label_i).
    /// All rows start locked.
    pub fn new(noisy_labels: &[u16], classes: usize, k_init: f64, lambda: f64) -> Result<Self> {
        if k_init < 0.0 {
            return Err(Error::config(format!(
                "label init scale must be nonnegative, got {k_init}"
            )));
        }
        let n = noisy_labels.len();
        let mut logits = Array2::zeros((n, classes));
        for (i, &y) in noisy_labels.iter().enumerate() {
            if y as usize >= classes {
                return Err(Error::config(format!(
                    "label {y} out of range for {classes} classes (sample {i})"
                )));
            }
            logits[[i, y as usize]] = k_init;
        }
        Ok(LabelStore {
            logits,
            k_init,
            lambda,
            updatable: vec![false; n],
            ever_changed: vec![false; n],
            init_labels: noisy_labels.to_vec(),
            skipped_nonfinite: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn k_init(&self) -> f64 {
        self.k_init
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn unlock(&mut self, rows: &[usize]) {
        for &r in rows {
            self.updatable[r] = true;
        }
    }

    pub fn updatable_count(&self) -> usize {
        self.updatable.iter().filter(|&&u| u).count()
    }

    pub fn is_updatable(&self, row: usize) -> bool {
        self.updatable[row]
    }

    /// Count of rows whose argmax ever moved away from the initial label.
    pub fn dirty_count(&self) -> usize {
        self.ever_changed.iter().filter(|&&d| d).count()
    }

    pub fn skipped_nonfinite(&self) -> u64 {
        self.skipped_nonfinite
    }

    /// Descend each unlocked row by lambda times the summed gradients.
    /// Rows with a non-finite summed gradient are skipped and counted.
    pub fn apply_label_gradient(
        &mut self,
        rows: &[usize],
        grad1: ArrayView2<f64>,
        grad2: ArrayView2<f64>,
    ) -> Result<()> {
        let c = self.classes();
        if grad1.nrows() != rows.len()
            || grad2.nrows() != rows.len()
            || grad1.ncols() != c
            || grad2.ncols() != c
        {
            return Err(Error::Shape(format!(
                "apply_label_gradient: {} rows, grads {}x{} and {}x{}",
                rows.len(),
                grad1.nrows(),
                grad1.ncols(),
                grad2.nrows(),
                grad2.ncols()
            )));
        }
        for (bi, &row) in rows.iter().enumerate() {
            if !self.updatable[row] {
                continue;
            }
            let summed: Vec<f64> = (0..c).map(|j| grad1[[bi, j]] + grad2[[bi, j]]).collect();
            if summed.iter().any(|g| !g.is_finite()) {
                self.skipped_nonfinite += 1;
                log::warn!("label gradient for sample {row} is non-finite; step skipped");
                continue;
            }
            for (j, g) in summed.iter().enumerate() {
                self.logits[[row, j]] -= self.lambda * g;
            }
            if !self.ever_changed[row] {
                let am = argmax(self.logits.row(row));
                if am != self.init_labels[row] as usize {
                    self.ever_changed[row] = true;
                }
            }
        }
        Ok(())
    }

    /// Label distributions for a batch of rows (stabilized softmax).
    pub fn distributions(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.classes()));
        for (bi, &row) in rows.iter().enumerate() {
            out.row_mut(bi).assign(&self.logits.row(row));
        }
        softmax_rows_f64(out.view())
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn hard_labels(&self) -> Vec<u16> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r) as u16)
            .collect()
    }

    /// Raw logits, for checkpointing and audits.
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    /// Write the full store as CSV with a metadata header line.
    pub fn export_csv(&self, path: &Path, epoch: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "# n={} c={} K={} lambda={} epoch={}",
            self.len(),
            self.classes(),
            self.k_init,
            self.lambda,
            epoch
        )?;
        write!(f, "id")?;
        for j in 0..self.classes() {
            write!(f, ",logit_{j}")?;
        }
        writeln!(f, ",updatable,changed")?;
        for i in 0..self.len() {
            write!(f, "{i}")?;
            for j in 0..self.classes() {
                write!(f, ",{}", self.logits[[i, j]])?;
            }
            writeln!(
                f,
                ",{},{}",
                self.updatable[i] as u8, self.ever_changed[i] as u8
            )?;
        }
        Ok(())
    }

    pub(crate) fn to_parts(&self) -> StoreParts<'_> {
        (
            self.logits.view(),
            &self.updatable,
            &self.ever_changed,
            &self.init_labels,
            self.k_init,
            self.lambda,
        )
    }

    pub(crate) fn from_parts(
        logits: Array2<f64>,
        updatable: Vec<bool>,
        ever_changed: Vec<bool>,
        init_labels: Vec<u16>,
        k_init: f64,
        lambda: f64,
    ) -> Self {
        LabelStore {
            logits,
            k_init,
            lambda,
            updatable,
            ever_changed,
            init_labels,
            skipped_nonfinite: 0,
        }
    }
}
