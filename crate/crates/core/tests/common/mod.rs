//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use dpcheck::data::{self, DataConfig};
use dpcheck::dp_sim::{CopyPolicy, DpConfig, ZeroStage};
use dpcheck::loss_agg::AggregationMode;
use dpcheck::model::{MicroBatch, TinyLM};
use dpcheck::numerics::{AdamWConfig, LrSchedule};
use rand::seq::SliceRandom;
use rand::Rng;

/// A fully specified training case: config, initial model and dataset.
pub struct Case {
    pub cfg: DpConfig,
    pub model: TinyLM,
    pub data: Vec<MicroBatch>,
}

/// Random fixed-pipeline configuration in the ranges the oracle suite covers.
pub fn random_case<R: Rng>(rng: &mut R, steps: usize) -> Case {
    let pick = |rng: &mut R, xs: &[usize]| *xs.choose(rng).unwrap();
    let k = pick(rng, &[1, 2, 4, 8]);
    let g = pick(rng, &[1, 2, 4, 8]);
    let vocab = rng.gen_range(2..=16);
    let hidden = rng.gen_range(1..=8);
    let seed = rng.gen();
    let peak = 10f64.powf(rng.gen_range(-3.0..-1.0));
    let schedule = if rng.gen_bool(0.5) {
        LrSchedule::cosine_warmup(peak, steps)
    } else {
        LrSchedule::constant(peak, steps)
    };
    let cfg = DpConfig {
        dp_size: k,
        accum_steps: g,
        zero_stage: if rng.gen_bool(0.5) {
            ZeroStage::One
        } else {
            ZeroStage::Two
        },
        offload: rng.gen_bool(0.5),
        copy_policy: CopyPolicy::EveryMicroBatch,
        agg_mode: AggregationMode::GlobalTokenMean,
        optimizer: AdamWConfig {
            weight_decay: rng.gen_range(0.0..0.1),
            ..AdamWConfig::default()
        },
        schedule,
        total_steps: steps,
        seed,
        micro_batch_size: rng.gen_range(1..=2),
        parallel: false,
    };
    let data_cfg = DataConfig::new(steps * cfg.samples_per_step(), vocab, hidden);
    Case {
        model: TinyLM::random(vocab, hidden, 0.5, seed),
        data: data::generate(&data_cfg, seed).unwrap(),
        cfg,
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y, floor))
        .fold(0.0, f64::max)
}

/// Independent masked cross-entropy sum for a flattened `[embed | out_proj]`
/// parameter vector.
pub fn naive_loss_sum(params: &[f64], vocab: usize, hidden: usize, batch: &MicroBatch) -> f64 {
    let (embed, out) = params.split_at(vocab * hidden);
    let mut total = 0.0;
    for t in 0..batch.tokens.len() {
        if batch.mask[t] == 0 {
            continue;
        }
        let e = &embed[batch.tokens[t] * hidden..][..hidden];
        let logits: Vec<f64> = (0..vocab)
            .map(|j| (0..hidden).map(|k| e[k] * out[k * vocab + j]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[batch.targets[t]];
    }
    total
}

/// Five-point central difference of `f` at every coordinate of `x`.
pub fn five_point_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |d: f64| {
                probe[i] = x[i] + d;
                let v = f(&probe);
                probe[i] = x[i];
                v
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

pub fn random_batch<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> MicroBatch {
    let tokens = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let targets = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let mask = (0..len).map(|_| u8::from(rng.gen_bool(0.7))).collect();
    MicroBatch::new(tokens, targets, mask).unwrap()
}
