//! Sweeps ranks, accumulation steps, ZeRO stages and offload, and compares
//! each fixed-pipeline run with the single-device full-batch reference.
//!
//! cargo run --release --example oracle_equivalence

use dpcheck::data::{generate, DataConfig};
use dpcheck::dp_sim::{DpConfig, ZeroStage};
use dpcheck::model::TinyLM;
use dpcheck::numerics::LrSchedule;
use dpcheck::oracle::{oracle_equivalence, ORACLE_TOL};

fn main() -> dpcheck::Result<()> {
    let steps = 20;
    let model = TinyLM::random(12, 6, 0.5, 5);
    println!(
        "{:>2} {:>2} {:>5} {:>7}  {:>12}",
        "K", "G", "stage", "offload", "max rel diff"
    );
    let mut worst = 0.0f64;
    for k in [1, 2, 4, 8] {
        for g in [1, 2, 4, 8] {
            for (stage, offload) in [(ZeroStage::One, false), (ZeroStage::Two, true)] {
                let cfg = DpConfig {
                    dp_size: k,
                    accum_steps: g,
                    zero_stage: stage,
                    offload,
                    total_steps: steps,
                    schedule: LrSchedule::cosine_warmup(3e-2, steps),
                    seed: 5,
                    ..DpConfig::default()
                };
                let data = generate(&DataConfig::new(steps * cfg.samples_per_step(), 12, 6), 5)?;
                let rep = oracle_equivalence(&cfg, &model, &data, ORACLE_TOL)?;
                worst = worst.max(rep.max_param_rel_diff);
                println!(
                    "{k:>2} {g:>2} {:>5} {offload:>7}  {:>12.3e}",
                    u8::from(stage),
                    rep.max_param_rel_diff
                );
            }
        }
    }
    println!("\nworst {worst:.3e} against tolerance {ORACLE_TOL:e}");
    Ok(())
}
