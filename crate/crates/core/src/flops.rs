//! Training-compute estimates from parameter and token counts.
//!
//! A forward pass costs `2ND` FLOPs and a backward pass `4ND`, so one
//! supervised sample costs `6ND`. An on-policy rollout is generated once
//! (`2ND`) and then trained on (`6ND`), for `8ND`. Only response tokens are
//! counted unless [`CostModel::token_scale`] says otherwise.
//!
//! Method presets live in `presets/flops.json` and are plain [`Preset`]
//! records, so new methods can be added without touching code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub n_params: f64,
    /// Multiplier on every token count, e.g. to fold in prompt tokens.
    #[serde(default = "one")]
    pub token_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl CostModel {
    pub fn new(n_params: f64) -> Self {
        CostModel {
            n_params,
            token_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraSft {
    pub updates: u64,
    pub batch: u64,
    pub tokens: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftPretrain {
    pub epochs: u64,
    pub samples: u64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSpec {
    pub name: String,
    pub steps: u64,
    pub batch_size: u64,
    pub on_policy_rollouts: u64,
    pub rollout_tokens: u64,
    pub off_policy_traces: u64,
    pub trace_tokens: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_sft: Option<ExtraSft>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_pretrain: Option<SftPretrain>,
}

pub fn sft_flops(n_params: f64, tokens: f64) -> f64 {
    6.0 * n_params * tokens
}

pub fn rollout_flops(n_params: f64, tokens: f64) -> f64 {
    8.0 * n_params * tokens
}

/// Every term of [`method_total`], kept separate for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// On-policy rollouts for one sample question.
    pub on_policy_per_sample: f64,
    /// Off-policy traces for one sample question.
    pub off_policy_per_sample: f64,
    pub per_sample: f64,
    pub rl_total: f64,
    pub extra_sft_total: f64,
    pub sft_pretrain_total: f64,
    pub total: f64,
}

pub fn breakdown(spec: &MethodSpec, model: &CostModel) -> Result<Breakdown> {
    let n = model.n_params;
    if n.is_nan() || n <= 0.0 {
        return Err(Error::InvalidConfig("n_params must be > 0".into()));
    }
    let tok = |t: u64| t as f64 * model.token_scale;
    let on_policy_per_sample =
        spec.on_policy_rollouts as f64 * rollout_flops(n, tok(spec.rollout_tokens));
    let off_policy_per_sample =
        spec.off_policy_traces as f64 * sft_flops(n, tok(spec.trace_tokens));
    let per_sample = on_policy_per_sample + off_policy_per_sample;
    let rl_total = (spec.steps * spec.batch_size) as f64 * per_sample;
    let extra_sft_total = spec
        .extra_sft
        .map(|e| (e.updates * e.batch) as f64 * sft_flops(n, tok(e.tokens)))
        .unwrap_or(0.0);
    let sft_pretrain_total = spec
        .sft_pretrain
        .map(|p| (p.epochs * p.samples) as f64 * sft_flops(n, tok(p.tokens)))
        .unwrap_or(0.0);
    let total = rl_total + extra_sft_total + sft_pretrain_total;
    if total == 0.0 {
        return Err(Error::EmptyMethod);
    }
    Ok(Breakdown {
        on_policy_per_sample,
        off_policy_per_sample,
        per_sample,
        rl_total,
        extra_sft_total,
        sft_pretrain_total,
        total,
    })
}

pub fn method_total(spec: &MethodSpec, model: &CostModel) -> Result<f64> {
    breakdown(spec, model).map(|b| b.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub n_params: f64,
    pub spec: MethodSpec,
}

impl Preset {
    pub fn cost_model(&self) -> CostModel {
        CostModel::new(self.n_params)
    }
}

const PRESETS_JSON: &str = include_str!("../presets/flops.json");

pub fn presets() -> Vec<Preset> {
    serde_json::from_str(PRESETS_JSON).expect("bundled presets are valid JSON")
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

/// Three significant figures, e.g. `6.65e19`.
pub fn format_sci(x: f64) -> String {
    format!("{x:.2e}")
}
