//! Group-relative policy optimization with asymmetric ratio clipping and a
//! token-level loss.
//!
//! Advantages are rewards minus the group mean, with no standard-deviation
//! scaling. The loss has no KL term and no per-sequence length normalization:
//! every masked token in the group is summed and divided once by the group's
//! total masked token count.
//!
//! The [`bandit`] submodule drives [`TinyLM`](crate::model::TinyLM) as a
//! categorical policy on a one-token bandit to show the objective learning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::check_len;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub rollouts_per_prompt: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            rollouts_per_prompt: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.eps_low) || !unit(self.eps_high) {
            return Err(Error::InvalidConfig(
                "clip epsilons must lie in (0, 1)".into(),
            ));
        }
        if self.rollouts_per_prompt == 0 {
            return Err(Error::InvalidConfig(
                "rollouts_per_prompt must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rewards: Vec<f64>,
    pub logp_new: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
    pub masks: Vec<Vec<u8>>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn masked_tokens(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m != 0).count()
    }

    fn validate(&self, adv: &[f64]) -> Result<usize> {
        let g = self.size();
        check_len(g, adv.len())?;
        check_len(g, self.logp_new.len())?;
        check_len(g, self.logp_old.len())?;
        check_len(g, self.masks.len())?;
        for i in 0..g {
            check_len(self.masks[i].len(), self.logp_new[i].len())?;
            check_len(self.masks[i].len(), self.logp_old[i].len())?;
        }
        match self.masked_tokens() {
            0 => Err(Error::NoActiveTokens),
            n => Ok(n),
        }
    }
}

pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidConfig("empty reward group".into()));
    }
    // Mean taken relative to the first reward, so a constant group yields
    // advantages of exactly zero.
    let pivot = rewards[0];
    let offset = rewards.iter().map(|r| r - pivot).sum::<f64>() / rewards.len() as f64;
    let mean = pivot + offset;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Clipped surrogate for one token. Returns the term and whether the
/// unclipped branch was selected; ties go to the unclipped branch.
fn surrogate(ratio: f64, adv: f64, cfg: &GrpoConfig) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

pub fn grpo_token_loss(group: &RolloutGroup, adv: &[f64], cfg: &GrpoConfig) -> Result<f64> {
    let total = group.validate(adv)?;
    let mut acc = 0.0;
    for (i, a) in adv.iter().enumerate() {
        for t in 0..group.masks[i].len() {
            if group.masks[i][t] == 0 {
                continue;
            }
            let ratio = (group.logp_new[i][t] - group.logp_old[i][t]).exp();
            acc += surrogate(ratio, *a, cfg).0;
        }
    }
    Ok(-acc / total as f64)
}

/// Gradient of [`grpo_token_loss`] with respect to `logp_new`, shaped like
/// the group's sequences.
pub fn grpo_grad(group: &RolloutGroup, adv: &[f64], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>> {
    let total = group.validate(adv)? as f64;
    Ok(adv
        .iter()
        .enumerate()
        .map(|(i, a)| {
            (0..group.masks[i].len())
                .map(|t| {
                    if group.masks[i][t] == 0 {
                        return 0.0;
                    }
                    let ratio = (group.logp_new[i][t] - group.logp_old[i][t]).exp();
                    match surrogate(ratio, *a, cfg) {
                        (_, true) => -ratio * a / total,
                        (_, false) => 0.0,
                    }
                })
                .collect()
        })
        .collect())
}

pub mod bandit {
    //! One-token contextual bandit: the prompt is a token, the action is the
    //! sampled next token, and the reward is 1 when the action hits the
    //! prompt's target.

    use rand::distributions::{Distribution, WeightedIndex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::{Deserialize, Serialize};

    use super::{group_advantage, grpo_grad, grpo_token_loss, GrpoConfig, RolloutGroup};
    use crate::diagnostics::TraceRecord;
    use crate::error::{Error, Result};
    use crate::model::{backward_weighted, forward, log_sum_exp, MicroBatch, TinyLM};
    use crate::numerics::{adamw_step_in_place, AdamWConfig, AdamWState, Vector};

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct BanditConfig {
        pub steps: usize,
        pub vocab: usize,
        pub hidden: usize,
        pub prompts_per_step: usize,
        /// Optimization passes over each batch of rollouts.
        pub inner_epochs: usize,
        pub lr: f64,
        pub seed: u64,
        pub grpo: GrpoConfig,
    }

    impl Default for BanditConfig {
        fn default() -> Self {
            BanditConfig {
                steps: 200,
                vocab: 8,
                hidden: 4,
                prompts_per_step: 8,
                inner_epochs: 2,
                lr: 0.05,
                seed: 0,
                grpo: GrpoConfig::default(),
            }
        }
    }

    impl BanditConfig {
        pub fn validate(&self) -> Result<()> {
            self.grpo.validate()?;
            if self.vocab < 2
                || self.hidden == 0
                || self.prompts_per_step == 0
                || self.inner_epochs == 0
            {
                return Err(Error::InvalidConfig(
                    "vocab >= 2, hidden, prompts_per_step and inner_epochs >= 1 required".into(),
                ));
            }
            if self.lr.is_nan() || self.lr <= 0.0 {
                return Err(Error::InvalidConfig("lr must be > 0".into()));
            }
            Ok(())
        }
    }

    pub fn target_action(prompt: usize, vocab: usize) -> usize {
        (5 * prompt + 3) % vocab
    }

    fn action_logps(model: &TinyLM, prompts: &[usize], actions: &[usize]) -> Result<Vec<f64>> {
        let batch = MicroBatch::new(prompts.to_vec(), actions.to_vec(), vec![1; prompts.len()])?;
        let logits = forward(model, &batch)?;
        Ok(logits
            .iter()
            .zip(actions)
            .map(|(row, &a)| row[a] - log_sum_exp(row))
            .collect())
    }

    /// Probability the greedy-free policy assigns to the rewarded action,
    /// averaged over all prompts.
    pub fn expected_reward(model: &TinyLM) -> Result<f64> {
        let v = model.vocab_size();
        let prompts: Vec<usize> = (0..v).collect();
        let targets: Vec<usize> = prompts.iter().map(|&p| target_action(p, v)).collect();
        let lp = action_logps(model, &prompts, &targets)?;
        Ok(lp.iter().map(|l| l.exp()).sum::<f64>() / v as f64)
    }

    pub struct BanditRun {
        pub trace: Vec<TraceRecord>,
        pub model: TinyLM,
    }

    /// Runs the bandit. Each trace record stores the mean sampled reward of
    /// the step in `loss`; the last record is taken after the final update.
    pub fn run(cfg: &BanditConfig) -> Result<BanditRun> {
        cfg.validate()?;
        let v = cfg.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = TinyLM::random(v, cfg.hidden, 0.1, cfg.seed.wrapping_add(1));
        let mut params = model.params().clone();
        let mut state = AdamWState::new(params.len());
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let group_size = cfg.grpo.rollouts_per_prompt;
        let mut trace = Vec::with_capacity(cfg.steps + 1);

        for step in 0..=cfg.steps {
            let prompts: Vec<usize> = (0..cfg.prompts_per_step)
                .map(|_| rng.gen_range(0..v))
                .collect();
            let logits = forward(
                &model,
                &MicroBatch::new(prompts.clone(), prompts.clone(), vec![1; prompts.len()])?,
            )?;

            let mut groups = Vec::with_capacity(prompts.len());
            let mut total_reward = 0.0;
            for (&p, row) in prompts.iter().zip(&logits) {
                let lse = log_sum_exp(row);
                let probs: Vec<f64> = row.iter().map(|l| (l - lse).exp()).collect();
                let dist =
                    WeightedIndex::new(&probs).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                let actions: Vec<usize> = (0..group_size).map(|_| dist.sample(&mut rng)).collect();
                let rewards: Vec<f64> = actions
                    .iter()
                    .map(|&a| f64::from(u8::from(a == target_action(p, v))))
                    .collect();
                total_reward += rewards.iter().sum::<f64>();
                let old: Vec<f64> = actions.iter().map(|&a| row[a] - lse).collect();
                groups.push((p, actions, rewards, old));
            }
            let mean_reward = total_reward / (prompts.len() * group_size) as f64;

            let mut grad_norm = 0.0;
            if step < cfg.steps {
                for _ in 0..cfg.inner_epochs {
                    let mut grad = Vector::zeros(params.len());
                    for (p, actions, rewards, old) in &groups {
                        let adv = group_advantage(rewards)?;
                        let ps = vec![*p; actions.len()];
                        let new = action_logps(&model, &ps, actions)?;
                        let group = RolloutGroup {
                            rewards: rewards.clone(),
                            logp_new: new.iter().map(|&x| vec![x]).collect(),
                            logp_old: old.iter().map(|&x| vec![x]).collect(),
                            masks: vec![vec![1]; actions.len()],
                        };
                        debug_assert!(grpo_token_loss(&group, &adv, &cfg.grpo).is_ok());
                        let dlogp = grpo_grad(&group, &adv, &cfg.grpo)?;
                        // d logp = -d CE, and each group is averaged over prompts.
                        let weights: Vec<f64> =
                            dlogp.iter().map(|d| -d[0] / prompts.len() as f64).collect();
                        let batch = MicroBatch::new(ps, actions.clone(), vec![1; actions.len()])?;
                        grad.add_assign(&backward_weighted(&model, &batch, &weights)?)?;
                    }
                    grad_norm = grad.l2_norm();
                    adamw_step_in_place(&mut params, &grad, &mut state, &opt, cfg.lr)?;
                    model.set_params(params.clone())?;
                }
            }

            trace.push(TraceRecord {
                step,
                loss: mean_reward,
                grad_norm,
                lr: if step < cfg.steps { cfg.lr } else { 0.0 },
                global_token_count: prompts.len() * group_size,
                per_rank_counts: vec![prompts.len() * group_size],
            });
        }
        Ok(BanditRun { trace, model })
    }
}
