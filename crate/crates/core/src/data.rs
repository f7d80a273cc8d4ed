//! Seeded synthetic SFT-style data.
//!
//! Each sample has a random length and a random response fraction; the leading
//! "prompt" positions are masked out. Active-token counts therefore differ from
//! sample to sample, which is the condition under which mean-of-means
//! aggregation diverges from the true token mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MicroBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_len_range")]
    pub len_range: [usize; 2],
    #[serde(default = "default_density_range")]
    pub mask_density_range: [f64; 2],
}

fn default_vocab() -> usize {
    8
}
fn default_hidden() -> usize {
    4
}
fn default_len_range() -> [usize; 2] {
    [4, 32]
}
fn default_density_range() -> [f64; 2] {
    [0.2, 0.9]
}

impl DataConfig {
    pub fn new(n_samples: usize, vocab: usize, hidden: usize) -> Self {
        DataConfig {
            n_samples,
            vocab,
            hidden,
            len_range: default_len_range(),
            mask_density_range: default_density_range(),
        }
    }

    /// Wide length and density ranges, so per-cell token counts span two
    /// orders of magnitude and the aggregation modes separate clearly.
    pub fn heterogeneous(n_samples: usize, vocab: usize, hidden: usize) -> Self {
        DataConfig {
            len_range: [2, 160],
            mask_density_range: [0.01, 1.0],
            ..DataConfig::new(n_samples, vocab, hidden)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.len_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "len_range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        let [dlo, dhi] = self.mask_density_range;
        if !(0.0 < dlo && dlo <= dhi && dhi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_density_range must satisfy 0 < lo <= hi <= 1, got [{dlo}, {dhi}]"
            )));
        }
        if self.vocab < 2 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "vocab >= 2 and hidden >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

/// Probability that a target follows the learnable token mapping rather than
/// being drawn uniformly.
const SIGNAL: f64 = 0.75;

fn mapped_target(token: usize, vocab: usize) -> usize {
    (3 * token + 1) % vocab
}

pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Vec<MicroBatch>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let [lo, hi] = cfg.len_range;
    let [dlo, dhi] = cfg.mask_density_range;
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let len = rng.gen_range(lo..=hi);
        let density = if dlo == dhi {
            dlo
        } else {
            rng.gen_range(dlo..dhi)
        };
        let active = ((density * len as f64).round() as usize).clamp(1, len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let targets = tokens
            .iter()
            .map(|&t| {
                if rng.gen_bool(SIGNAL) {
                    mapped_target(t, cfg.vocab)
                } else {
                    rng.gen_range(0..cfg.vocab)
                }
            })
            .collect();
        let mask = (0..len).map(|i| u8::from(i >= len - active)).collect();
        out.push(MicroBatch::new(tokens, targets, mask)?);
    }
    Ok(out)
}
