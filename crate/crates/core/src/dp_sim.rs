//! Simulated data-parallel training with gradient accumulation, host-offload
//! staging buffers and ZeRO-style partitioned optimizer state.
//!
//! One optimizer step ("macro step") proceeds as:
//!
//! 1. The step's samples are sharded round-robin into a `K x G` grid of cells.
//! 2. The global active-token count is computed up front (it is needed by
//!    [`AggregationMode::GlobalTokenMean`] before any backward pass).
//! 3. Each rank runs its `G` micro-steps: backward with the aggregation mode's
//!    per-cell scale, then add into the device accumulation buffer. With
//!    offload enabled the [`CopyPolicy`] decides when the device buffer is
//!    copied into the host staging buffer.
//! 4. The optimizer input (staging when offloaded, device otherwise) is averaged
//!    across ranks per index, and each rank applies AdamW to the parameter slice
//!    it owns.
//!
//! [`CopyPolicy::FirstMicroBatchOnly`] reproduces the offload bug: the copy only
//! runs on micro-step 0, so the host optimizer sees only the first micro-batch's
//! gradient. [`CopyPolicy::EveryMicroBatch`] is the fix.
//!
//! Ranks may run concurrently (`parallel = true`). Rank buffers are always
//! reduced in rank order through the canonical pairwise sum, so parallel and
//! sequential runs are bit-identical.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::TraceRecord;
use crate::error::{Error, Result};
use crate::loss_agg::{
    effective_global_loss, masked_stats, upstream_scale_active, AggregationMode, CellGrid,
    RankLossStats,
};
use crate::model::{backward, masked_ce, MicroBatch, TinyLM};
use crate::numerics::{
    adamw_step_in_place, lr_at, pairwise, AdamWConfig, AdamWState, LrSchedule, Vector,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CopyPolicy {
    /// Copy device gradients to the host only on micro-step 0.
    FirstMicroBatchOnly,
    /// Copy after every micro-step.
    EveryMicroBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ZeroStage {
    /// Optimizer state partitioned.
    One,
    /// Optimizer state and reduced gradients partitioned.
    Two,
}

impl TryFrom<u8> for ZeroStage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(ZeroStage::One),
            2 => Ok(ZeroStage::Two),
            other => Err(format!("zero_stage must be 1 or 2, got {other}")),
        }
    }
}

impl From<ZeroStage> for u8 {
    fn from(s: ZeroStage) -> u8 {
        match s {
            ZeroStage::One => 1,
            ZeroStage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub dp_size: usize,
    pub accum_steps: usize,
    pub zero_stage: ZeroStage,
    pub offload: bool,
    pub copy_policy: CopyPolicy,
    pub agg_mode: AggregationMode,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub total_steps: usize,
    pub seed: u64,
    pub micro_batch_size: usize,
    /// Run ranks on the rayon pool. Results are bit-identical either way.
    pub parallel: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            dp_size: 2,
            accum_steps: 4,
            zero_stage: ZeroStage::Two,
            offload: true,
            copy_policy: CopyPolicy::EveryMicroBatch,
            agg_mode: AggregationMode::GlobalTokenMean,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::cosine_warmup(5e-2, 20),
            total_steps: 20,
            seed: 0,
            micro_batch_size: 1,
            parallel: false,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dp_size == 0 || self.accum_steps == 0 || self.micro_batch_size == 0 {
            return Err(Error::InvalidConfig(
                "dp_size, accum_steps and micro_batch_size must be >= 1".into(),
            ));
        }
        if self.schedule.total_steps < self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "schedule covers {} steps but the run has {}",
                self.schedule.total_steps, self.total_steps
            )));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }

    pub fn samples_per_step(&self) -> usize {
        self.dp_size * self.accum_steps * self.micro_batch_size
    }

    /// The policy that actually runs: without offload there is no host copy,
    /// which behaves like copying every micro-step.
    pub fn effective_copy_policy(&self) -> CopyPolicy {
        if self.offload {
            self.copy_policy
        } else {
            CopyPolicy::EveryMicroBatch
        }
    }
}

/// Contiguous equal slices of the parameter vector, one per rank; the last
/// rank takes the remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMap {
    ranges: Vec<Range<usize>>,
}

impl PartitionMap {
    pub fn new(num_params: usize, dp_size: usize) -> Self {
        let chunk = num_params / dp_size;
        let ranges = (0..dp_size)
            .map(|r| {
                let end = if r + 1 == dp_size {
                    num_params
                } else {
                    (r + 1) * chunk
                };
                r * chunk..end
            })
            .collect();
        PartitionMap { ranges }
    }

    pub fn owner(&self, index: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&index))
    }

    pub fn slice(&self, rank: usize) -> Range<usize> {
        self.ranges[rank].clone()
    }

    pub fn dp_size(&self) -> usize {
        self.ranges.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagingBuffer {
    pub grad: Vector,
    pub dirty: bool,
}

/// Per-rank gradient buffers for one accumulation cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct RankState {
    pub device: Vector,
    pub staging: StagingBuffer,
    pub micro_index: usize,
}

impl RankState {
    pub fn new(num_params: usize) -> Self {
        RankState {
            device: Vector::zeros(num_params),
            staging: StagingBuffer {
                grad: Vector::zeros(num_params),
                dirty: false,
            },
            micro_index: 0,
        }
    }

    fn copy_to_staging(&mut self) {
        self.staging.grad.copy_from_slice(&self.device);
        self.staging.dirty = true;
    }

    fn reset(&mut self) {
        self.device.fill_zero();
        self.staging.grad.fill_zero();
        self.staging.dirty = false;
        self.micro_index = 0;
    }

    /// Buffer the optimizer reads from.
    pub fn optimizer_input(&self, offload: bool) -> &Vector {
        if offload {
            &self.staging.grad
        } else {
            &self.device
        }
    }
}

/// Cells of one step, `[rank][micro_step]`, each the concatenation of its
/// samples.
pub type BatchGrid = Vec<Vec<MicroBatch>>;

/// Shards the step's slice round-robin: sample `i` goes to rank `i % K`,
/// micro-step `(i / K) % G`.
pub fn partition_batch(dataset: &[MicroBatch], step: usize, cfg: &DpConfig) -> Result<BatchGrid> {
    let n = cfg.samples_per_step();
    let start = step * n;
    let end = start + n;
    if end > dataset.len() {
        return Err(Error::InsufficientData {
            step,
            needed: end,
            available: dataset.len(),
        });
    }
    let (k, g) = (cfg.dp_size, cfg.accum_steps);
    let mut members: Vec<Vec<Vec<&MicroBatch>>> = vec![vec![Vec::new(); g]; k];
    for (i, sample) in dataset[start..end].iter().enumerate() {
        members[i % k][(i / k) % g].push(sample);
    }
    Ok(members
        .into_iter()
        .map(|row| row.into_iter().map(MicroBatch::concat).collect())
        .collect())
}

/// Work for one optimizer step: the cell grid plus the step-wide counts that
/// are all-reduced before any backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub cells: BatchGrid,
    /// Active tokens over the whole grid.
    pub global_count: usize,
    /// Cells with at least one active token.
    pub active_cells: usize,
}

impl StepPlan {
    pub fn from_grid(cells: BatchGrid) -> Self {
        let global_count = cells.iter().flatten().map(MicroBatch::active_count).sum();
        let active_cells = cells
            .iter()
            .flatten()
            .filter(|c| c.active_count() > 0)
            .count();
        StepPlan {
            cells,
            global_count,
            active_cells,
        }
    }
}

pub fn plan_steps(dataset: &[MicroBatch], cfg: &DpConfig) -> Result<Vec<StepPlan>> {
    (0..cfg.total_steps)
        .map(|s| partition_batch(dataset, s, cfg).map(StepPlan::from_grid))
        .collect()
}

/// One forward/backward on one rank, accumulated into its device buffer.
pub fn micro_step(
    rank: &mut RankState,
    model: &TinyLM,
    micro: &MicroBatch,
    cfg: &DpConfig,
    global_count: usize,
    active_cells: usize,
) -> Result<()> {
    let scale = upstream_scale_active(
        cfg.agg_mode,
        micro.active_count(),
        global_count,
        active_cells,
        cfg.dp_size,
        cfg.accum_steps,
    )?;
    let grad = backward(model, micro, scale)?;
    rank.device.add_assign(&grad)?;
    if cfg.offload {
        match cfg.copy_policy {
            CopyPolicy::FirstMicroBatchOnly => {
                if rank.micro_index == 0 {
                    rank.copy_to_staging();
                }
            }
            CopyPolicy::EveryMicroBatch => rank.copy_to_staging(),
        }
    }
    rank.micro_index += 1;
    Ok(())
}

/// Per-index mean over ranks, reduced in rank order.
fn rank_mean(ranks: &[RankState], offload: bool, range: Range<usize>) -> Vec<f64> {
    let k = ranks.len() as f64;
    let mut column = vec![0.0; ranks.len()];
    range
        .map(|i| {
            for (c, r) in column.iter_mut().zip(ranks) {
                *c = r.optimizer_input(offload)[i];
            }
            pairwise(&column) / k
        })
        .collect()
}

/// Reduces rank gradients, updates each owned slice with AdamW, and clears the
/// buffers. Returns the cross-rank-averaged optimizer input.
pub fn optimizer_step(
    ranks: &mut [RankState],
    opt_states: &mut [AdamWState],
    partition: &PartitionMap,
    cfg: &DpConfig,
    lr: f64,
    params: &mut Vector,
) -> Result<Vector> {
    let n = params.len();
    let averaged = match cfg.zero_stage {
        // Every rank holds the full reduced gradient and reads its slice.
        ZeroStage::One => Vector::from_vec(rank_mean(ranks, cfg.offload, 0..n)),
        // Reduce-scatter: each owner reduces only its own slice.
        ZeroStage::Two => {
            let mut full = Vec::with_capacity(n);
            for r in 0..partition.dp_size() {
                full.extend(rank_mean(ranks, cfg.offload, partition.slice(r)));
            }
            Vector::from_vec(full)
        }
    };
    for (r, state) in opt_states.iter_mut().enumerate() {
        let range = partition.slice(r);
        adamw_step_in_place(
            &mut params[range.clone()],
            &averaged[range],
            state,
            &cfg.optimizer,
            lr,
        )?;
    }
    ranks.iter_mut().for_each(RankState::reset);
    Ok(averaged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub final_params: Vector,
    pub trace: Vec<TraceRecord>,
    /// Effective global loss of each step under the run's aggregation mode.
    pub losses: Vec<f64>,
    /// Parameters after each step.
    pub param_history: Vec<Vector>,
}

fn cell_stats(model: &TinyLM, cells: &BatchGrid, parallel: bool) -> Result<CellGrid> {
    let row = |row: &Vec<MicroBatch>| -> Result<Vec<RankLossStats>> {
        row.iter()
            .map(|c| {
                let (l, _) = masked_ce(model, c)?;
                masked_stats(&l, &c.mask)
            })
            .collect()
    };
    let stats: Result<Vec<_>> = if parallel {
        cells.par_iter().map(row).collect()
    } else {
        cells.iter().map(row).collect()
    };
    CellGrid::new(stats?)
}

/// Trains on explicit step plans. [`run_training`] is the usual entry point;
/// this one lets callers substitute cells or token counts.
pub fn run_plans(cfg: &DpConfig, model: &TinyLM, plans: &[StepPlan]) -> Result<RunResult> {
    cfg.validate()?;
    let n = model.num_params();
    let partition = PartitionMap::new(n, cfg.dp_size);
    let mut opt_states: Vec<AdamWState> = (0..cfg.dp_size)
        .map(|r| AdamWState::new(partition.slice(r).len()))
        .collect();
    let mut ranks: Vec<RankState> = (0..cfg.dp_size).map(|_| RankState::new(n)).collect();
    let mut model = model.clone();
    let mut params = model.params().clone();

    let mut trace = Vec::with_capacity(plans.len());
    let mut losses = Vec::with_capacity(plans.len());
    let mut param_history = Vec::with_capacity(plans.len());

    for (step, plan) in plans.iter().enumerate() {
        if plan.cells.len() != cfg.dp_size || plan.cells.iter().any(|r| r.len() != cfg.accum_steps)
        {
            return Err(Error::InvalidConfig(format!(
                "step {step}: plan shape does not match dp_size x accum_steps"
            )));
        }
        let stats = cell_stats(&model, &plan.cells, cfg.parallel)?;
        let loss = effective_global_loss(cfg.agg_mode, &stats)?;

        let run_rank = |(rank, cells): (&mut RankState, &Vec<MicroBatch>)| -> Result<()> {
            for micro in cells {
                micro_step(
                    rank,
                    &model,
                    micro,
                    cfg,
                    plan.global_count,
                    plan.active_cells,
                )?;
            }
            Ok(())
        };
        if cfg.parallel {
            ranks
                .par_iter_mut()
                .zip(plan.cells.par_iter())
                .try_for_each(run_rank)?;
        } else {
            ranks
                .iter_mut()
                .zip(plan.cells.iter())
                .try_for_each(run_rank)?;
        }

        let lr = lr_at(&cfg.schedule, step)?;
        let averaged = optimizer_step(
            &mut ranks,
            &mut opt_states,
            &partition,
            cfg,
            lr,
            &mut params,
        )?;
        model.set_params(params.clone())?;

        trace.push(TraceRecord {
            step,
            loss,
            grad_norm: averaged.l2_norm(),
            lr,
            global_token_count: stats.global_count(),
            per_rank_counts: stats.per_rank_counts(),
        });
        losses.push(loss);
        param_history.push(params.clone());
    }

    Ok(RunResult {
        final_params: params,
        trace,
        losses,
        param_history,
    })
}

pub fn run_training(cfg: &DpConfig, model: &TinyLM, dataset: &[MicroBatch]) -> Result<RunResult> {
    cfg.validate()?;
    let plans = plan_steps(dataset, cfg)?;
    run_plans(cfg, model, &plans)
}
