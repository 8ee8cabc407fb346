//! Label corruption protocols.
//!
//! An exact count round(rate * n_train) of train samples is corrupted,
//! chosen uniformly without replacement, so the realized rate is sharp
//! rather than binomially distributed. Symmetric noise draws the
//! replacement uniformly from the other classes; pairflip sends class y to
//! (y+1) mod c, imitating confusions between adjacent fine-grained classes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NoisyDataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Symmetric,
    Pairflip,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            model: NoiseModel::None,
            rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!(
                "noise rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        if self.model == NoiseModel::Pairflip && num_classes < 2 {
            return Err(Error::config(
                "pairflip noise needs at least 2 classes".to_string(),
            ));
        }
        Ok(())
    }
}

pub(super) fn inject(ds: &NoisyDataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    spec.validate(ds.num_classes())?;
    let mut out = ds.clone();
    // reset: corruption always starts from clean labels
    let mut noisy: Vec<u16> = ds.clean_labels().to_vec();
    if spec.model == NoiseModel::None || spec.rate == 0.0 {
        out.set_noisy(noisy);
        return Ok(out);
    }

    let train = ds.ids(Split::Train);
    let m = (spec.rate * train.len() as f64).round() as usize;
    let mut order = train;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order[..m].to_vec();
    chosen.sort_unstable();

    let c = ds.num_classes() as u16;
    for &id in &chosen {
        let y = ds.clean_labels()[id];
        noisy[id] = match spec.model {
            NoiseModel::Symmetric => {
                // uniform over the other c-1 classes, never the original
                let r = rng.random_range(0..c - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            }
            NoiseModel::Pairflip => (y + 1) % c,
            NoiseModel::None => unreachable!(),
        };
    }
    out.set_noisy(noisy);
    Ok(out)
}
