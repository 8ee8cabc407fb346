//! Datasets with stable sample ids, split tags, and controlled label noise.
//!
//! A dataset is immutable once constructed: every transformation (split
//! reassignment, subsampling, noise injection) returns a new value, so any
//! pipeline is reproducible from its seeds alone. Clean labels ride along
//! for evaluation only; the trainer sees `noisy_label`.

mod batch;
mod folder;
mod idx;
mod noise;
mod synth;

pub use batch::{Augment, Batch};
pub use noise::{NoiseModel, NoiseSpec};

use ndarray::{Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One sample, borrowed out of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct NoisySample<'a> {
    pub id: usize,
    pub image: ArrayView3<'a, f32>,
    pub clean_label: u16,
    pub noisy_label: u16,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct NoisyDataset {
    pub name: String,
    images: Array4<f32>,
    clean: Vec<u16>,
    noisy: Vec<u16>,
    split: Vec<Split>,
    num_classes: usize,
    class_names: Vec<String>,
}

impl NoisyDataset {
    pub(crate) fn from_parts(
        name: String,
        images: Array4<f32>,
        clean: Vec<u16>,
        split: Vec<Split>,
        num_classes: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = images.shape()[0];
        if clean.len() != n || split.len() != n {
            return Err(Error::Shape(format!(
                "dataset parts disagree: {n} images, {} labels, {} split tags",
                clean.len(),
                split.len()
            )));
        }
        for (i, &y) in clean.iter().enumerate() {
            if y as usize >= num_classes {
                return Err(Error::Shape(format!(
                    "label {y} out of range for {num_classes} classes (sample {i})"
                )));
            }
        }
        Ok(NoisyDataset {
            name,
            noisy: clean.clone(),
            images,
            clean,
            split,
            num_classes,
            class_names,
        })
    }

    /// Load a dataset by identifier.
    ///
    /// * `mnist` — IDX files (optionally .gz) under `root`.
    /// * `synth-digits` — procedurally generated 28x28 digit glyphs; `root`
    ///   is unused. 60,000 train / 10,000 test like the files it stands for.
    /// * `folder` — `root/<class_name>/<image>` layout.
    pub fn load(name: &str, root: &Path) -> Result<Self> {
        match name {
            "mnist" => idx::load_mnist(root),
            "synth-digits" => Ok(synth::generate(60_000, 10_000, 0)),
            "folder" => folder::load(root, None),
            other => Err(Error::config(format!("unknown dataset '{other}'"))),
        }
    }

    /// Synthetic digits at explicit sizes (used by tests and desk-scale runs).
    pub fn synth_digits(n_train: usize, n_test: usize, seed: u64) -> Self {
        synth::generate(n_train, n_test, seed)
    }

    /// Image-folder dataset with an optional square resize.
    pub fn image_folder(root: &Path, resize: Option<u32>) -> Result<Self> {
        folder::load(root, resize)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// (channels, height, width) of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn sample(&self, id: usize) -> NoisySample<'_> {
        NoisySample {
            id,
            image: self.images.index_axis(ndarray::Axis(0), id),
            clean_label: self.clean[id],
            noisy_label: self.noisy[id],
            split: self.split[id],
        }
    }

    /// Ids of a split, ascending.
    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }

    pub fn clean_labels(&self) -> &[u16] {
        &self.clean
    }

    pub fn noisy_labels(&self) -> &[u16] {
        &self.noisy
    }

    pub fn noisy_labels_of(&self, split: Split) -> Vec<u16> {
        self.ids(split).iter().map(|&i| self.noisy[i]).collect()
    }

    pub fn clean_labels_of(&self, split: Split) -> Vec<u16> {
        self.ids(split).iter().map(|&i| self.clean[i]).collect()
    }

    /// Reassign split tags by seeded shuffle. Ratios must sum to 1; sizes
    /// follow the ratios with the rounding remainder going to earlier
    /// splits.
    pub fn split_dataset(&self, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::config(format!("negative split ratio in {ratios:?}")));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        let n_train = (ratios[0] * n as f64).floor() as usize;
        let n_val = (ratios[1] * n as f64).floor() as usize;
        let n_test = (ratios[2] * n as f64).floor() as usize;
        // rounding remainder goes to train
        let remainder = n - n_train - n_val - n_test;
        let sizes = [n_train + remainder, n_val, n_test];

        let mut split = vec![Split::Train; n];
        let mut cursor = 0;
        for (si, &count) in sizes.iter().enumerate() {
            let tag = [Split::Train, Split::Validation, Split::Test][si];
            for &id in &order[cursor..cursor + count] {
                split[id] = tag;
            }
            cursor += count;
        }
        let mut out = self.clone();
        out.split = split;
        // split reassignment invalidates any previous corruption
        out.noisy = out.clean.clone();
        Ok(out)
    }

    /// Keep a seeded uniform subsample of the train split (other splits are
    /// untouched). Used for desk-scale experiments.
    pub fn subsample_train(&self, keep: usize, seed: u64) -> Result<Self> {
        let train = self.ids(Split::Train);
        if keep > train.len() {
            return Err(Error::config(format!(
                "cannot keep {keep} of {} train samples",
                train.len()
            )));
        }
        let mut order = train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let kept: std::collections::HashSet<usize> = order[..keep].iter().copied().collect();
        let keep_ids: Vec<usize> = (0..self.len())
            .filter(|i| self.split[*i] != Split::Train || kept.contains(i))
            .collect();
        self.select(&keep_ids)
    }

    /// Materialize a subset (re-indexes ids 0..k in the given order).
    fn select(&self, ids: &[usize]) -> Result<Self> {
        let (c, h, w) = self.image_shape();
        let mut images = Array4::zeros((ids.len(), c, h, w));
        let mut clean = Vec::with_capacity(ids.len());
        let mut noisy = Vec::with_capacity(ids.len());
        let mut split = Vec::with_capacity(ids.len());
        for (new_id, &old_id) in ids.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), new_id)
                .assign(&self.images.index_axis(ndarray::Axis(0), old_id));
            clean.push(self.clean[old_id]);
            noisy.push(self.noisy[old_id]);
            split.push(self.split[old_id]);
        }
        Ok(NoisyDataset {
            name: self.name.clone(),
            images,
            clean,
            noisy,
            split,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        })
    }

    /// Corrupt exactly round(rate * n_train) train labels according to the
    /// spec; validation and test labels are never touched. Applying a new
    /// spec resets any previous corruption first.
    pub fn inject_noise(&self, spec: &NoiseSpec) -> Result<Self> {
        noise::inject(self, spec)
    }

    /// Seeded-shuffle mini-batches over one split. Each epoch-level call
    /// with the same seed yields the identical order; derive the seed from
    /// (run seed, epoch) to reshuffle per epoch.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        augment: Augment,
    ) -> impl Iterator<Item = Batch> + '_ {
        batch::stream(self, split, batch_size, Some(seed), augment)
    }

    /// Unshuffled, unaugmented batches for evaluation and feature passes.
    pub fn eval_batches(
        &self,
        split: Split,
        batch_size: usize,
    ) -> impl Iterator<Item = Batch> + '_ {
        batch::stream(self, split, batch_size, None, Augment::None)
    }

    #[cfg(test)]
    pub(crate) fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub(crate) fn set_noisy(&mut self, noisy: Vec<u16>) {
        self.noisy = noisy;
    }

    /// Retag the given (train) ids as validation samples.
    pub(crate) fn move_to_validation(&mut self, ids: &[usize]) {
        for &id in ids {
            debug_assert_eq!(self.split[id], Split::Train);
            self.split[id] = Split::Validation;
        }
    }

    /// Write the audit manifest: id, clean and observed label, corruption
    /// flag — train split only.
    pub fn write_noise_manifest(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,clean_label,noisy_label,corrupted")?;
        for id in self.ids(Split::Train) {
            writeln!(
                f,
                "{},{},{},{}",
                id,
                self.clean[id],
                self.noisy[id],
                u8::from(self.clean[id] != self.noisy[id])
            )?;
        }
        Ok(())
    }

    /// Fraction of train samples whose observed label is corrupted.
    pub fn realized_noise_rate(&self) -> f64 {
        let train = self.ids(Split::Train);
        if train.is_empty() {
            return 0.0;
        }
        let bad = train
            .iter()
            .filter(|&&i| self.clean[i] != self.noisy[i])
            .count();
        bad as f64 / train.len() as f64
    }
}
