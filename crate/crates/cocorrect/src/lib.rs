//! Noise-tolerant classifier training.
//!
//! The library trains a pair of identically-structured classifiers that
//! cross-select small-loss samples from the batch positions where both
//! networks agree, maintains a per-sample soft label store corrected by
//! gradient descent on label logits, and gates which labels may be
//! corrected through a density-peak curriculum computed once from the
//! warm-up features. A standard single-network baseline, noise injection
//! utilities, metrics, and a report renderer round out the experiment CLI.

pub mod config;
pub mod curriculum;
pub mod data;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod trainer;
pub mod util;

mod error;

pub use error::{Error, Result};
