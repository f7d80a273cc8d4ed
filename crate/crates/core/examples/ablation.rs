//! The copy-policy x aggregation ablation on heterogeneous data, each variant
//! compared with the reference trainer and classified by the detector.
//!
//! cargo run --release --example ablation

use dpcheck::cli::{run_diff, ExperimentConfig, VARIANTS};
use dpcheck::data::DataConfig;
use dpcheck::dp_sim::DpConfig;
use dpcheck::numerics::LrSchedule;
use dpcheck::oracle::ORACLE_TOL;

fn main() -> dpcheck::Result<()> {
    let steps = 100;
    let run = DpConfig {
        dp_size: 2,
        accum_steps: 8,
        total_steps: steps,
        schedule: LrSchedule::cosine_warmup(5e-2, steps),
        seed: 1,
        ..DpConfig::default()
    };
    let mut cfg = ExperimentConfig {
        data: DataConfig::heterogeneous(steps * run.samples_per_step(), 8, 4),
        run,
        output_dir: "out".into(),
        label: "ablation".into(),
    };
    cfg.resolve()?;

    let (report, _) = run_diff(&cfg, &VARIANTS, ORACLE_TOL)?;
    println!(
        "reference: final loss {:.4}, median grad norm {:.4}\n",
        report.reference_final_loss, report.reference_median_grad_norm
    );
    println!(
        "{:<8} {:>10} {:>10} {:>10} {:>10}  verdict",
        "variant", "final", "norm", "var", "shift"
    );
    for v in &report.variants {
        let d = v
            .verdict
            .expect("100-step traces are long enough to classify");
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}  {}{}",
            v.name,
            v.final_loss,
            d.norm_ratio,
            d.variance_ratio,
            d.mean_shift,
            d.label(),
            if v.matches_oracle {
                " (matches oracle)"
            } else {
                ""
            }
        );
    }
    Ok(())
}
