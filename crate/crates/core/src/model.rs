//! A toy token-level language model: an embedding lookup followed by an
//! output projection, with no mixing between positions.
//!
//! Gradients are always taken of the masked *sum* of per-token losses. How
//! that sum is normalized is decided by [`crate::loss_agg`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_len, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM {
    vocab_size: usize,
    hidden: usize,
    /// `embed` (V x H, row-major) followed by `out_proj` (H x V, row-major).
    params: Vector,
}

impl TinyLM {
    pub fn zeros(vocab_size: usize, hidden: usize) -> Self {
        TinyLM {
            vocab_size,
            hidden,
            params: Vector::zeros(2 * vocab_size * hidden),
        }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab_size: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..2 * vocab_size * hidden)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect::<Vec<_>>();
        TinyLM {
            vocab_size,
            hidden,
            params: params.into(),
        }
    }

    pub fn from_matrices(embed: &[Vec<f64>], out_proj: &[Vec<f64>]) -> Result<Self> {
        let vocab_size = embed.len();
        let hidden = out_proj.len();
        let mut params = Vec::with_capacity(2 * vocab_size * hidden);
        for row in embed {
            check_len(hidden, row.len())?;
            params.extend_from_slice(row);
        }
        for row in out_proj {
            check_len(vocab_size, row.len())?;
            params.extend_from_slice(row);
        }
        Ok(TinyLM {
            vocab_size,
            hidden,
            params: params.into(),
        })
    }

    pub fn from_params(vocab_size: usize, hidden: usize, params: Vector) -> Result<Self> {
        check_len(2 * vocab_size * hidden, params.len())?;
        Ok(TinyLM {
            vocab_size,
            hidden,
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &Vector {
        &self.params
    }

    pub fn set_params(&mut self, params: Vector) -> Result<()> {
        check_len(self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn embed_row(&self, token: usize) -> &[f64] {
        let h = self.hidden;
        &self.params[token * h..(token + 1) * h]
    }

    fn out_offset(&self) -> usize {
        self.vocab_size * self.hidden
    }

    fn logits_for(&self, token: usize, out: &mut [f64]) {
        let (v, h) = (self.vocab_size, self.hidden);
        let e = self.embed_row(token);
        let w = &self.params[self.out_offset()..];
        out.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..h {
            let ek = e[k];
            let row = &w[k * v..(k + 1) * v];
            for (o, wk) in out.iter_mut().zip(row) {
                *o += ek * wk;
            }
        }
    }

    fn check_batch(&self, batch: &MicroBatch) -> Result<()> {
        batch.validate()?;
        for &id in batch.tokens.iter().chain(&batch.targets) {
            if id >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// One packed unit of work: a token sequence, next-token targets, and the
/// response mask (1 = token contributes to the loss).
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MicroBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<u8>,
}

impl MicroBatch {
    pub fn new(tokens: Vec<usize>, targets: Vec<usize>, mask: Vec<u8>) -> Result<Self> {
        let b = MicroBatch {
            tokens,
            targets,
            mask,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Same tokens with every mask entry cleared.
    pub fn with_zero_mask(&self) -> Self {
        MicroBatch {
            tokens: self.tokens.clone(),
            targets: self.targets.clone(),
            mask: vec![0; self.mask.len()],
        }
    }

    /// Concatenates samples in order. Exact for this model since positions
    /// never interact.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a MicroBatch>) -> Self {
        let mut out = MicroBatch::default();
        for p in parts {
            out.tokens.extend_from_slice(&p.tokens);
            out.targets.extend_from_slice(&p.targets);
            out.mask.extend_from_slice(&p.mask);
        }
        out
    }

    fn validate(&self) -> Result<()> {
        check_len(self.tokens.len(), self.targets.len())?;
        check_len(self.tokens.len(), self.mask.len())?;
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Per-token logits, `T x V`.
pub fn forward(model: &TinyLM, batch: &MicroBatch) -> Result<Vec<Vec<f64>>> {
    model.check_batch(batch)?;
    Ok(batch
        .tokens
        .iter()
        .map(|&tok| {
            let mut row = vec![0.0; model.vocab_size];
            model.logits_for(tok, &mut row);
            row
        })
        .collect())
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max + s.ln()
}

/// Masked per-token cross entropy and the active count.
pub fn masked_ce(model: &TinyLM, batch: &MicroBatch) -> Result<(Vec<f64>, usize)> {
    let logits = forward(model, batch)?;
    let losses = logits
        .iter()
        .zip(&batch.targets)
        .zip(&batch.mask)
        .map(|((row, &y), &m)| {
            if m == 0 {
                0.0
            } else {
                log_sum_exp(row) - row[y]
            }
        })
        .collect();
    Ok((losses, batch.active_count()))
}

/// Sum of the masked per-token cross entropy.
pub fn masked_loss_sum(model: &TinyLM, batch: &MicroBatch) -> Result<f64> {
    let (losses, _) = masked_ce(model, batch)?;
    Ok(losses.iter().sum())
}

/// Gradient of `upstream_scale * sum_t mask[t] * CE_t` with respect to the
/// flattened parameters.
pub fn backward(model: &TinyLM, batch: &MicroBatch, upstream_scale: f64) -> Result<Vector> {
    let weights: Vec<f64> = batch
        .mask
        .iter()
        .map(|&m| if m == 0 { 0.0 } else { upstream_scale })
        .collect();
    backward_weighted(model, batch, &weights)
}

/// Gradient of `sum_t weights[t] * CE_t`. The mask is ignored; callers fold it
/// into `weights`.
pub fn backward_weighted(model: &TinyLM, batch: &MicroBatch, weights: &[f64]) -> Result<Vector> {
    model.check_batch(batch)?;
    check_len(batch.len(), weights.len())?;
    let (v, h) = (model.vocab_size, model.hidden);
    let off = model.out_offset();
    let mut grad = Vector::zeros(model.num_params());
    let mut logits = vec![0.0; v];
    let mut dlogits = vec![0.0; v];
    for t in 0..batch.len() {
        let w = weights[t];
        if w == 0.0 {
            continue;
        }
        let tok = batch.tokens[t];
        model.logits_for(tok, &mut logits);
        let lse = log_sum_exp(&logits);
        for (d, l) in dlogits.iter_mut().zip(&logits) {
            *d = w * (l - lse).exp();
        }
        dlogits[batch.targets[t]] -= w;

        let e = model.embed_row(tok).to_vec();
        let wout = &model.params[off..];
        for k in 0..h {
            let row = &wout[k * v..(k + 1) * v];
            let mut de = 0.0;
            for j in 0..v {
                de += row[j] * dlogits[j];
            }
            grad[tok * h + k] += de;
            let grow = &mut grad[off + k * v..off + (k + 1) * v];
            for j in 0..v {
                grow[j] += e[k] * dlogits[j];
            }
        }
    }
    Ok(grad)
}

/// Central-difference gradient of the masked loss sum, one parameter at a time.
pub fn finite_diff_grad(model: &TinyLM, batch: &MicroBatch, h: f64) -> Result<Vector> {
    model.check_batch(batch)?;
    let mut probe = model.clone();
    let mut grad = Vector::zeros(model.num_params());
    for i in 0..model.num_params() {
        let orig = model.params[i];
        probe.params[i] = orig + h;
        let plus = masked_loss_sum(&probe, batch)?;
        probe.params[i] = orig - h;
        let minus = masked_loss_sum(&probe, batch)?;
        probe.params[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
