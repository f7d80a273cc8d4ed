//! The offloaded-optimizer copy bug in isolation.
//!
//! One rank runs G micro-steps on identical micro-batches. With
//! `FirstMicroBatchOnly` the host staging buffer is filled on micro-step 0 and
//! never refreshed, so the optimizer sees 1/G of the accumulated gradient.
//!
//! cargo run --example copy_policy_bug

use dpcheck::dp_sim::{micro_step, CopyPolicy, DpConfig, RankState};
use dpcheck::model::{MicroBatch, TinyLM};

fn main() -> dpcheck::Result<()> {
    let model = TinyLM::random(6, 3, 0.5, 42);
    let micro = MicroBatch::new(vec![0, 1, 2, 3], vec![1, 2, 3, 4], vec![0, 1, 1, 1])?;

    println!(
        "{:>3}  {:>12}  {:>12}  {:>8}",
        "G", "fixed |g|", "buggy |g|", "ratio"
    );
    for g in [1, 2, 4, 8, 16] {
        let mut norms = [0.0; 2];
        for (slot, policy) in [CopyPolicy::EveryMicroBatch, CopyPolicy::FirstMicroBatchOnly]
            .into_iter()
            .enumerate()
        {
            let cfg = DpConfig {
                dp_size: 1,
                accum_steps: g,
                offload: true,
                copy_policy: policy,
                ..DpConfig::default()
            };
            let global = g * micro.active_count();
            let mut rank = RankState::new(model.num_params());
            for _ in 0..g {
                micro_step(&mut rank, &model, &micro, &cfg, global, g)?;
            }
            norms[slot] = rank.optimizer_input(true).l2_norm();
        }
        println!(
            "{g:>3}  {:>12.6}  {:>12.6}  {:>8.5}",
            norms[0],
            norms[1],
            norms[1] / norms[0]
        );
    }

    // Without offload the optimizer reads the device buffer, so the policy is inert.
    let cfg = DpConfig {
        dp_size: 1,
        accum_steps: 4,
        offload: false,
        copy_policy: CopyPolicy::FirstMicroBatchOnly,
        ..DpConfig::default()
    };
    println!(
        "\noffload = false: effective policy {:?}",
        cfg.effective_copy_policy()
    );
    Ok(())
}
