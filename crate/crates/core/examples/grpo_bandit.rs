//! GRPO on a contextual bandit: the TinyLM picks one token per prompt and is
//! rewarded for the prompt's target token.
//!
//! cargo run --release --example grpo_bandit -- [seed]

use dpcheck::grpo::bandit::{run, BanditConfig};
use dpcheck::grpo::{group_advantage, grpo_grad, grpo_token_loss, GrpoConfig, RolloutGroup};

fn main() -> dpcheck::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    // Ratio 1.6 with positive advantage is capped at 1 + eps_high and ratio
    // 0.5 with negative advantage at 1 - eps_low; both get zero gradient.
    // Ratio 1.1 lies inside the clip range.
    let group = RolloutGroup {
        rewards: vec![1.0, 0.0, 1.0],
        logp_new: vec![vec![1.6f64.ln()], vec![0.5f64.ln()], vec![1.1f64.ln()]],
        logp_old: vec![vec![0.0], vec![0.0], vec![0.0]],
        masks: vec![vec![1], vec![1], vec![1]],
    };
    let cfg = GrpoConfig::default();
    let adv = group_advantage(&group.rewards)?;
    println!("advantages {adv:?}");
    println!("loss {:.4}", grpo_token_loss(&group, &adv, &cfg)?);
    println!("d loss / d logp_new {:?}\n", grpo_grad(&group, &adv, &cfg)?);

    let run = run(&BanditConfig {
        seed,
        ..BanditConfig::default()
    })?;
    println!("{:>5}  {:>11}", "step", "mean reward");
    for r in run.trace.iter().step_by(20) {
        println!("{:>5}  {:>11.4}", r.step, r.loss);
    }
    Ok(())
}
