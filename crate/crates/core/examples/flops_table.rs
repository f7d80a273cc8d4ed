//! Training-compute estimates for the bundled method presets.
//!
//! cargo run --example flops_table

use dpcheck::flops::{breakdown, format_sci, presets};

fn main() -> dpcheck::Result<()> {
    println!(
        "{:<16} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
        "method", "on-policy/q", "off-policy/q", "RL", "extra SFT", "SFT", "total"
    );
    for p in presets() {
        let b = breakdown(&p.spec, &p.cost_model())?;
        println!(
            "{:<16} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
            p.name,
            format_sci(b.on_policy_per_sample),
            format_sci(b.off_policy_per_sample),
            format_sci(b.rl_total),
            format_sci(b.extra_sft_total),
            format_sci(b.sft_pretrain_total),
            format_sci(b.total),
        );
    }
    Ok(())
}
