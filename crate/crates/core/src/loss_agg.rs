//! Loss aggregation over a `rank x micro-batch` grid of cells.
//!
//! Two modes are provided:
//!
//! * [`AggregationMode::MeanOfMeans`]: each cell backpropagates its own token
//!   mean divided by the accumulation count, and ranks are averaged. Cells with
//!   few active tokens are over-weighted.
//! * [`AggregationMode::GlobalTokenMean`]: the global active-token count is
//!   all-reduced first and each cell backpropagates `S / N * K`, so that the
//!   cross-rank average recovers the true per-token mean.
//!
//! Empty cells (no active tokens) contribute zero loss in both modes, and
//! mean-of-means leaves them out of its denominator: the effective loss is the
//! average of the nonempty cells' means. With no empty cells that is exactly
//! what gradient accumulation followed by rank averaging produces; when some
//! cells are empty, [`upstream_scale_active`] rescales the per-cell loss to
//! keep the pipeline equal to the closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_len, pairwise, stable_sum};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RankLossStats {
    pub loss_sum: f64,
    pub token_count: usize,
}

impl RankLossStats {
    pub fn new(loss_sum: f64, token_count: usize) -> Self {
        RankLossStats {
            loss_sum,
            token_count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMode {
    MeanOfMeans,
    GlobalTokenMean,
}

/// Per-cell statistics indexed `[rank][micro_batch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    stats: Vec<Vec<RankLossStats>>,
}

impl CellGrid {
    pub fn new(stats: Vec<Vec<RankLossStats>>) -> Result<Self> {
        let g = stats.first().map(Vec::len).unwrap_or(0);
        if stats.is_empty() || g == 0 {
            return Err(Error::InvalidConfig(
                "grid needs at least one rank and one micro-batch".into(),
            ));
        }
        for row in &stats {
            check_len(g, row.len())?;
        }
        Ok(CellGrid { stats })
    }

    pub fn dp_size(&self) -> usize {
        self.stats.len()
    }

    pub fn accum_steps(&self) -> usize {
        self.stats[0].len()
    }

    pub fn cells(&self) -> impl Iterator<Item = &RankLossStats> {
        self.stats.iter().flatten()
    }

    pub fn rank(&self, k: usize) -> &[RankLossStats] {
        &self.stats[k]
    }

    /// Number of cells with at least one active token.
    pub fn active_cells(&self) -> usize {
        self.cells().filter(|c| !c.is_empty()).count()
    }

    pub fn global_count(&self) -> usize {
        self.cells().map(|c| c.token_count).sum()
    }

    pub fn per_rank_counts(&self) -> Vec<usize> {
        self.stats
            .iter()
            .map(|row| row.iter().map(|c| c.token_count).sum())
            .collect()
    }
}

pub fn masked_stats(per_token_loss: &[f64], mask: &[u8]) -> Result<RankLossStats> {
    check_len(per_token_loss.len(), mask.len())?;
    let token_count = mask.iter().filter(|&&m| m != 0).count();
    let loss_sum = if token_count == 0 {
        0.0
    } else {
        stable_sum(per_token_loss)?
    };
    Ok(RankLossStats::new(loss_sum, token_count))
}

/// Simulated all-reduce: every rank observes the same canonical sum.
pub fn allreduce_sum(per_rank_values: &[f64]) -> Result<f64> {
    if per_rank_values.is_empty() {
        return Err(Error::InvalidConfig("all-reduce over zero ranks".into()));
    }
    stable_sum(per_rank_values)
}

/// Multiplier applied to a cell's loss sum before backward, for a step in
/// which every cell has active tokens. The cell's backward loss is
/// `loss_sum * upstream_scale`.
pub fn upstream_scale(
    mode: AggregationMode,
    cell_count: usize,
    global_count: usize,
    dp_size: usize,
    accum_steps: usize,
) -> Result<f64> {
    upstream_scale_active(
        mode,
        cell_count,
        global_count,
        dp_size * accum_steps,
        dp_size,
        accum_steps,
    )
}

/// [`upstream_scale`] for a step with `active_cells` nonempty cells out of
/// `dp_size * accum_steps`.
pub fn upstream_scale_active(
    mode: AggregationMode,
    cell_count: usize,
    global_count: usize,
    active_cells: usize,
    dp_size: usize,
    accum_steps: usize,
) -> Result<f64> {
    match mode {
        AggregationMode::MeanOfMeans => {
            if cell_count == 0 {
                return Ok(0.0);
            }
            if active_cells == 0 || active_cells > dp_size * accum_steps {
                return Err(Error::InvalidConfig(format!(
                    "active_cells = {active_cells} outside 1..={}",
                    dp_size * accum_steps
                )));
            }
            // Equals accum_steps exactly when no cell is empty.
            let per_rank = active_cells as f64 / dp_size as f64;
            Ok(1.0 / cell_count as f64 / per_rank)
        }
        AggregationMode::GlobalTokenMean => {
            if global_count == 0 {
                return Err(Error::NoActiveTokens);
            }
            if cell_count == 0 {
                return Ok(0.0);
            }
            Ok(1.0 / global_count as f64 * dp_size as f64)
        }
    }
}

/// The scalar a cell backpropagates before rank averaging and accumulation.
pub fn local_backward_loss(
    mode: AggregationMode,
    cell: RankLossStats,
    global_count: usize,
    dp_size: usize,
    accum_steps: usize,
) -> Result<f64> {
    if cell.is_empty() {
        if mode == AggregationMode::GlobalTokenMean && global_count == 0 {
            return Err(Error::NoActiveTokens);
        }
        return Ok(0.0);
    }
    match mode {
        AggregationMode::MeanOfMeans => {
            Ok(cell.loss_sum / cell.token_count as f64 / accum_steps as f64)
        }
        AggregationMode::GlobalTokenMean => {
            if global_count == 0 {
                return Err(Error::NoActiveTokens);
            }
            Ok(cell.loss_sum / global_count as f64 * dp_size as f64)
        }
    }
}

/// Closed form of the loss whose gradient the whole pipeline applies.
pub fn effective_global_loss(mode: AggregationMode, grid: &CellGrid) -> Result<f64> {
    if grid.cells().all(RankLossStats::is_empty) {
        return Err(Error::NoActiveTokens);
    }
    match mode {
        AggregationMode::MeanOfMeans => {
            let means: Vec<f64> = grid
                .cells()
                .filter(|c| !c.is_empty())
                .map(|c| c.loss_sum / c.token_count as f64)
                .collect();
            Ok(pairwise(&means) / means.len() as f64)
        }
        AggregationMode::GlobalTokenMean => {
            let sums: Vec<f64> = grid.cells().map(|c| c.loss_sum).collect();
            Ok(pairwise(&sums) / grid.global_count() as f64)
        }
    }
}
