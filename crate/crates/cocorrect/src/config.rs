//! Experiment configuration: TOML schema, defaults, and validation.
//!
//! Unknown keys are rejected. Optional knobs resolve to defaults that
//! depend on the dataset and noise level (the label-correction rate table,
//! the selection floor tau equal to the noise rate, alpha reduced under
//! extreme noise), and the fully resolved configuration is serialized into
//! every run directory so a run is reproducible from its artifacts alone.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::data::{Augment, NoiseModel, NoiseSpec};
use crate::error::{Error, Result};

/// Environment variable consulted when `dataset.root` is relative or unset.
pub const DATA_ROOT_ENV: &str = "COCORRECT_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cocorrecting,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Each network trains on the subset chosen by its peer's losses.
    Peer,
    /// Each network trains on its own small-loss subset.
    Own,
    /// Both networks train on the intersection of the two subsets.
    Intersection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// One of: mnist, synth-digits, folder.
    pub name: String,
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Keep only this many train samples (seeded subsample).
    #[serde(default)]
    pub subset_train: Option<usize>,
    /// Synthetic dataset sizes (ignored for file-backed datasets).
    #[serde(default)]
    pub synth_train: Option<usize>,
    #[serde(default)]
    pub synth_test: Option<usize>,
    /// Train/validation/test ratios for datasets without predefined splits.
    #[serde(default)]
    pub split: Option<[f64; 3]>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Square resize for folder datasets.
    #[serde(default)]
    pub image_size: Option<u32>,
    /// none | digits | flips; defaults per dataset.
    #[serde(default)]
    pub augment: Option<Augment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub model: NoiseModel,
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_width")]
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Defaults per dataset: 0.005 for digit data, 0.001 for folder data.
    #[serde(default)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clip (None disables).
    #[serde(default = "default_clip")]
    pub clip_grad_norm: Option<f64>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_e_k")]
    pub e_k: usize,
    /// Selection floor parameter; defaults to the noise rate.
    #[serde(default)]
    pub tau: Option<f64>,
    pub epochs_stage1: usize,
    pub epochs_stage3: usize,
    pub epochs_stage4: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    #[serde(default = "default_k_init")]
    pub k_init: f64,
    /// Label correction rate; defaults from the per-dataset rate table.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Compatibility weight; defaults to 1.0, halved at noise >= 0.4.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Apply the entropy term during fine-tuning as well (off by default:
    /// the fine-tune loss is the soft classification term alone).
    #[serde(default)]
    pub stage4_entropy: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    #[serde(default = "default_k_percentile")]
    pub k_percentile: f64,
    #[serde(default = "default_pca_dim")]
    pub pca_dim: usize,
    #[serde(default = "default_selection_mode")]
    pub selection_mode: SelectionMode,
    /// Keep every tier locked (ablation/testing switch).
    #[serde(default)]
    pub locked: bool,
}

fn default_seed() -> u64 {
    1
}
fn default_backbone() -> String {
    "cnn6".to_string()
}
fn default_width() -> usize {
    8
}
fn default_lr() -> f64 {
    0.02
}
fn default_momentum() -> f64 {
    0.9
}
fn default_e_k() -> usize {
    10
}
fn default_batch() -> usize {
    128
}
fn default_k_init() -> f64 {
    10.0
}
fn default_beta() -> f64 {
    0.1
}
fn default_k_percentile() -> f64 {
    60.0
}
fn default_pca_dim() -> usize {
    128
}
fn default_selection_mode() -> SelectionMode {
    SelectionMode::Peer
}
fn default_method() -> Method {
    Method::Cocorrecting
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    #[serde(default = "ModelConfig::default")]
    pub model: ModelConfig,
    #[serde(default = "OptimizerConfig::default")]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    #[serde(default = "LabelConfig::default")]
    pub label: LabelConfig,
    #[serde(default = "CurriculumConfig::default")]
    pub curriculum: CurriculumConfig,
    /// Checkpoint interval in epochs (0 = final/stage boundaries only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Resume training from this checkpoint file.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: default_backbone(),
            width: default_width(),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: None,
            clip_grad_norm: default_clip(),
        }
    }
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            k_init: default_k_init(),
            lambda: None,
            alpha: None,
            beta: default_beta(),
            stage4_entropy: false,
        }
    }
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            k_percentile: default_k_percentile(),
            pca_dim: default_pca_dim(),
            selection_mode: default_selection_mode(),
            locked: false,
        }
    }
}

/// Correction-rate table for the 10-class digit datasets, keyed by nominal
/// noise rate. Pairflip rates carry dedicated entries.
fn lambda_for_digits(model: NoiseModel, rate: f64) -> Option<f64> {
    let near = |a: f64, b: f64| (a - b).abs() < 1e-9;
    match model {
        NoiseModel::Pairflip => {
            if near(rate, 0.2) {
                Some(3000.0)
            } else if near(rate, 0.45) {
                Some(4000.0)
            } else {
                None
            }
        }
        _ => {
            for (r, l) in [
                (0.0, 500.0),
                (0.05, 1500.0),
                (0.1, 2000.0),
                (0.2, 2500.0),
                (0.3, 3000.0),
                (0.4, 4000.0),
            ] {
                if near(rate, r) {
                    return Some(l);
                }
            }
            None
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::load(path, format!("cannot read config: {e}")))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Runtime(format!("serialize config: {e}")))
    }

    /// Resolve data root: explicit config, else environment, else ".".
    pub fn data_root(&self) -> PathBuf {
        self.dataset
            .root
            .clone()
            .or_else(|| std::env::var(DATA_ROOT_ENV).ok().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            model: self.noise.model,
            rate: self.noise.rate,
            seed: self.noise.seed,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.epochs_stage1 + self.schedule.epochs_stage3 + self.schedule.epochs_stage4
    }

    pub fn tau(&self) -> f64 {
        self.schedule.tau.unwrap_or(self.noise.rate)
    }

    pub fn alpha(&self) -> f64 {
        self.label.alpha.unwrap_or(if self.noise.rate >= 0.4 {
            0.5
        } else {
            1.0
        })
    }

    pub fn weight_decay(&self) -> f64 {
        self.optimizer.weight_decay.unwrap_or(match self.dataset.name.as_str() {
            "folder" => 0.001,
            _ => 0.005,
        })
    }

    /// Label correction rate: explicit value, else the digit table.
    pub fn lambda(&self) -> Result<f64> {
        if let Some(l) = self.label.lambda {
            return Ok(l);
        }
        match self.dataset.name.as_str() {
            "mnist" | "synth-digits" => lambda_for_digits(self.noise.model, self.noise.rate)
                .ok_or_else(|| {
                    Error::config(format!(
                        "no default correction rate for noise {:?} at rate {}; set label.lambda",
                        self.noise.model, self.noise.rate
                    ))
                }),
            other => Err(Error::config(format!(
                "dataset '{other}' has no correction-rate table; set label.lambda"
            ))),
        }
    }

    pub fn augment(&self) -> Augment {
        self.dataset.augment.unwrap_or(match self.dataset.name.as_str() {
            "folder" => Augment::Flips,
            _ => Augment::Digits,
        })
    }

    /// A copy with every optional knob materialized to its resolved value,
    /// written into each run directory for reproducibility.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut out = self.clone();
        out.schedule.tau = Some(self.tau());
        out.label.alpha = Some(self.alpha());
        out.optimizer.weight_decay = Some(self.weight_decay());
        out.dataset.augment = Some(self.augment());
        out.dataset.root = Some(self.data_root());
        if self.method == Method::Cocorrecting && self.schedule.epochs_stage3 > 0 {
            out.label.lambda = Some(self.lambda()?);
        }
        Ok(out)
    }

    /// Reject invalid configurations before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.noise_spec().validate(usize::MAX)?;
        if self.schedule.epochs_stage1 == 0 {
            return Err(Error::config("epochs_stage1 must be at least 1".to_string()));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if self.method == Method::Cocorrecting
            && self.schedule.epochs_stage3 > 0
            && self.schedule.epochs_stage3 < 3
        {
            return Err(Error::config(format!(
                "epochs_stage3 must be 0 or >= 3 (three curriculum tiers), got {}",
                self.schedule.epochs_stage3
            )));
        }
        if !(0.0..1.0).contains(&self.tau()) {
            return Err(Error::config(format!(
                "tau must lie in [0, 1), got {}",
                self.tau()
            )));
        }
        if self.schedule.e_k == 0 {
            return Err(Error::config("e_k must be at least 1".to_string()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr
            )));
        }
        if self.label.k_init < 0.0 || self.label.beta < 0.0 || self.alpha() < 0.0 {
            return Err(Error::config(
                "label hyperparameters must be nonnegative".to_string(),
            ));
        }
        if self.method == Method::Cocorrecting && self.schedule.epochs_stage3 > 0 {
            // force the rate lookup so missing table entries fail early
            self.lambda()?;
            if !(0.0 < self.curriculum.k_percentile && self.curriculum.k_percentile <= 100.0) {
                return Err(Error::config(format!(
                    "curriculum percentile must lie in (0, 100], got {}",
                    self.curriculum.k_percentile
                )));
            }
            if self.curriculum.pca_dim == 0 {
                return Err(Error::config("pca_dim must be at least 1".to_string()));
            }
        }
        if let Some(split) = self.dataset.split {
            if split.iter().any(|&r| r < 0.0) {
                return Err(Error::config(format!("negative split ratio in {split:?}")));
            }
            let s: f64 = split.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("split ratios sum to {s}, expected 1")));
            }
        }
        Ok(())
    }
}
