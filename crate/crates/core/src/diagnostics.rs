//! Per-step trace records and paired-trace bug detection.
//!
//! The detector compares a candidate run against a reference run on the same
//! data and schedule. The two bugs leave different fingerprints:
//!
//! * dropped micro-batch gradients shrink the optimizer-input gradient norm,
//!   so the median norm ratio falls well below 1;
//! * mean-of-means aggregation over-weights cells with few active tokens, which
//!   inflates step-to-step loss noise around the trend.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fields are serialized in this order, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub global_token_count: usize,
    pub per_rank_counts: Vec<usize>,
}

/// Line-delimited trace sink that enforces strictly increasing steps.
pub struct TraceWriter<W: Write> {
    out: W,
    last: Option<usize>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out, last: None }
    }

    pub fn record(&mut self, rec: &TraceRecord) -> Result<()> {
        if let Some(last) = self.last {
            if rec.step <= last {
                return Err(Error::OutOfOrder {
                    last,
                    got: rec.step,
                });
            }
        }
        if !rec.grad_norm.is_finite() || rec.grad_norm < 0.0 {
            return Err(Error::NonFinite);
        }
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.last = Some(rec.step);
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn write_trace<W: Write>(out: W, records: &[TraceRecord]) -> Result<W> {
    let mut w = TraceWriter::new(out);
    for r in records {
        w.record(r)?;
    }
    Ok(w.into_inner())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)?;
        if let Some(prev) = out.last() {
            if rec.step <= prev.step {
                return Err(Error::OutOfOrder {
                    last: prev.step,
                    got: rec.step,
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub tau_norm: f64,
    pub tau_var: f64,
    pub window: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            tau_norm: 0.6,
            tau_var: 2.0,
            window: 9,
        }
    }
}

pub const MIN_TRACE_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub optimizer_bug: bool,
    pub aggregation_bug: bool,
    pub mean_shift: f64,
    pub variance_ratio: f64,
    pub norm_ratio: f64,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match (self.optimizer_bug, self.aggregation_bug) {
            (false, false) => "clean",
            (true, false) => "optimizer-bug",
            (false, true) => "aggregation-bug",
            (true, true) => "both",
        }
    }
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / values.len() as f64
}

/// Residuals after subtracting a centered moving average. Only positions with
/// a full window are kept.
pub fn detrend(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    if values.len() < 2 * half + 1 {
        return Vec::new();
    }
    (half..values.len() - half)
        .map(|i| values[i] - mean(&values[i - half..=i + half]))
        .collect()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::MAX
        }
    } else {
        num / den
    }
}

pub fn detect(
    candidate: &[TraceRecord],
    reference: &[TraceRecord],
    accum_steps: usize,
) -> Result<Verdict> {
    detect_with(candidate, reference, accum_steps, &DetectConfig::default())
}

/// `accum_steps` is only checked for sanity: a buggy run's expected norm ratio
/// is in `[1/G, 1)`, which needs `G >= 1`.
pub fn detect_with(
    candidate: &[TraceRecord],
    reference: &[TraceRecord],
    accum_steps: usize,
    cfg: &DetectConfig,
) -> Result<Verdict> {
    if candidate.len() != reference.len() {
        return Err(Error::InsufficientTrace(format!(
            "length mismatch: {} vs {}",
            candidate.len(),
            reference.len()
        )));
    }
    if candidate.len() < MIN_TRACE_LEN {
        return Err(Error::InsufficientTrace(format!(
            "{} steps, need at least {MIN_TRACE_LEN}",
            candidate.len()
        )));
    }
    if accum_steps == 0 {
        return Err(Error::InvalidConfig("accum_steps must be >= 1".into()));
    }
    let norms = |t: &[TraceRecord]| t.iter().map(|r| r.grad_norm).collect::<Vec<_>>();
    let losses = |t: &[TraceRecord]| t.iter().map(|r| r.loss).collect::<Vec<_>>();

    let norm_ratio = ratio(
        lower_median(&norms(candidate)).unwrap_or(0.0),
        lower_median(&norms(reference)).unwrap_or(0.0),
    );

    let (cl, rl) = (losses(candidate), losses(reference));
    let half = cl.len() / 2;
    let deltas: Vec<f64> = cl[half..]
        .iter()
        .zip(&rl[half..])
        .map(|(c, r)| c - r)
        .collect();
    let mean_shift = mean(&deltas);

    let variance_ratio = ratio(
        variance(&detrend(&cl, cfg.window)),
        variance(&detrend(&rl, cfg.window)),
    );

    Ok(Verdict {
        optimizer_bug: norm_ratio < cfg.tau_norm,
        aggregation_bug: variance_ratio > cfg.tau_var,
        mean_shift,
        variance_ratio,
        norm_ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub median_loss: f64,
    pub median_grad_norm: f64,
    pub loss_std: f64,
    /// Coefficient of variation of per-rank token counts over all steps.
    pub token_count_cv: f64,
}

pub fn summarize(trace: &[TraceRecord]) -> Result<TraceSummary> {
    if trace.is_empty() {
        return Err(Error::InsufficientTrace("empty trace".into()));
    }
    let losses: Vec<f64> = trace.iter().map(|r| r.loss).collect();
    let norms: Vec<f64> = trace.iter().map(|r| r.grad_norm).collect();
    let counts: Vec<f64> = trace
        .iter()
        .flat_map(|r| r.per_rank_counts.iter().map(|&c| c as f64))
        .collect();
    let token_count_cv = if counts.is_empty() || mean(&counts) == 0.0 {
        0.0
    } else {
        variance(&counts).sqrt() / mean(&counts)
    };
    Ok(TraceSummary {
        steps: trace.len(),
        median_loss: lower_median(&losses).unwrap(),
        median_grad_norm: lower_median(&norms).unwrap(),
        loss_std: variance(&losses).sqrt(),
        token_count_cv,
    })
}
