//! Mean-of-means versus global token mean on hand-built cell grids.
//!
//! cargo run --example loss_aggregation

use dpcheck::loss_agg::{
    effective_global_loss, local_backward_loss, AggregationMode, CellGrid, RankLossStats,
};

fn grid(rows: &[&[(f64, usize)]]) -> dpcheck::Result<CellGrid> {
    CellGrid::new(
        rows.iter()
            .map(|r| r.iter().map(|&(s, n)| RankLossStats::new(s, n)).collect())
            .collect(),
    )
}

fn show(name: &str, g: &CellGrid) -> dpcheck::Result<()> {
    let mom = effective_global_loss(AggregationMode::MeanOfMeans, g)?;
    let gtm = effective_global_loss(AggregationMode::GlobalTokenMean, g)?;
    println!("{name:<28} mean-of-means {mom:>8.5}   global token mean {gtm:>8.5}");
    Ok(())
}

fn main() -> dpcheck::Result<()> {
    // Two ranks, one micro-batch each: one token with loss 2, four tokens summing to 2.
    let hand = grid(&[&[(2.0, 1)], &[(2.0, 4)]])?;
    show("(2,1) | (2,4)", &hand)?;

    // Equal token counts: the modes coincide.
    show(
        "equal counts",
        &grid(&[&[(3.0, 3), (6.0, 3)], &[(1.5, 3), (4.5, 3)]])?,
    )?;

    // The same four tokens {1, 1, 1, 5}, split two ways.
    show("{1} | {1,1,5}", &grid(&[&[(1.0, 1)], &[(7.0, 3)]])?)?;
    show("{1,1} | {1,5}", &grid(&[&[(2.0, 2)], &[(6.0, 2)]])?)?;

    // An empty micro-batch contributes nothing and leaves the denominator.
    show(
        "with an empty cell",
        &grid(&[&[(3.0, 2), (0.0, 0)], &[(5.0, 2), (2.0, 2)]])?,
    )?;

    println!("\nper-cell backward losses for (2,4) with global count 10, K = 2, G = 1:");
    let cell = RankLossStats::new(2.0, 4);
    for mode in [
        AggregationMode::MeanOfMeans,
        AggregationMode::GlobalTokenMean,
    ] {
        println!("  {mode:?}: {}", local_backward_loss(mode, cell, 10, 2, 1)?);
    }
    Ok(())
}
