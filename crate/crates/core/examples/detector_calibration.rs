//! Runs the four copy-policy x aggregation variants on seeded heterogeneous
//! data and prints the detector statistics for each, against the fixed run.
//!
//! cargo run --release --example detector_calibration -- [seeds] [len_min len_max dens_lo dens_hi]

use dpcheck::cli::{variant, VARIANTS};
use dpcheck::data::{self, DataConfig};
use dpcheck::diagnostics::detect;
use dpcheck::dp_sim::{run_training, DpConfig};
use dpcheck::model::TinyLM;
use dpcheck::numerics::LrSchedule;

fn main() -> dpcheck::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let extra: Vec<f64> = std::env::args()
        .skip(2)
        .filter_map(|s| s.parse().ok())
        .collect();
    let (len_range, density) = match extra[..] {
        [a, b, c, d] => ([a as usize, b as usize], [c, d]),
        _ => {
            let h = DataConfig::heterogeneous(0, 8, 4);
            (h.len_range, h.mask_density_range)
        }
    };
    let steps = 100;
    let base = DpConfig {
        dp_size: 2,
        accum_steps: 8,
        total_steps: steps,
        schedule: LrSchedule::cosine_warmup(5e-2, steps),
        ..DpConfig::default()
    };
    let fixed = variant("fixed").unwrap();

    println!(
        "{:<8} {:>4} {:>10} {:>10} {:>10}  verdict",
        "variant", "seed", "norm", "var", "shift"
    );
    let mut extremes = vec![
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY
        );
        VARIANTS.len()
    ];
    for seed in 0..seeds {
        let cfg = DpConfig {
            seed,
            ..base.clone()
        };
        let data_cfg = DataConfig {
            len_range,
            mask_density_range: density,
            ..DataConfig::new(steps * cfg.samples_per_step(), 8, 4)
        };
        let dataset = data::generate(&data_cfg, seed)?;
        let model = TinyLM::random(8, 4, 0.5, seed);
        let reference = run_training(&fixed.apply(&cfg), &model, &dataset)?;
        for (i, v) in VARIANTS.iter().enumerate() {
            let run = run_training(&v.apply(&cfg), &model, &dataset)?;
            let verdict = detect(&run.trace, &reference.trace, cfg.accum_steps)?;
            let e = &mut extremes[i];
            e.0 = e.0.min(verdict.norm_ratio);
            e.1 = e.1.max(verdict.norm_ratio);
            e.2 = e.2.min(verdict.variance_ratio);
            e.3 = e.3.max(verdict.variance_ratio);
            println!(
                "{:<8} {:>4} {:>10.4} {:>10.4} {:>10.4}  {}",
                v.name,
                seed,
                verdict.norm_ratio,
                verdict.variance_ratio,
                verdict.mean_shift,
                verdict.label()
            );
        }
    }
    println!();
    for (v, (nlo, nhi, vlo, vhi)) in VARIANTS.iter().zip(extremes) {
        println!(
            "{:<8} norm_ratio [{nlo:.4}, {nhi:.4}]  variance_ratio [{vlo:.4}, {vhi:.4}]",
            v.name
        );
    }
    Ok(())
}
