//! Dense f64 numerics shared by the rest of the crate: deterministic
//! summation, the AdamW update, and learning-rate schedules.
//!
//! Every reduction in the simulator goes through [`stable_sum`], which sums in
//! a fixed index-ascending pairwise tree. Two runs that present the same values
//! in the same order therefore produce the same bits, regardless of how many
//! threads computed the values.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-length vector of f64, used for parameters, gradients and moments.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Vector(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &[f64]) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }

    /// L2 norm, with the squares reduced through [`stable_sum`].
    pub fn l2_norm(&self) -> f64 {
        let squares: Vec<f64> = self.0.iter().map(|v| v * v).collect();
        pairwise(&squares).sqrt()
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}

/// Pairwise sum in canonical order: split at `len / 2`, sum both halves,
/// add left + right.
pub fn stable_sum(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(pairwise(values))
}

// Leaves below this size are summed left to right; the tree shape is still a
// pure function of the length.
const LEAF: usize = 8;

pub(crate) fn pairwise(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise(&values[..mid]) + pairwise(&values[mid..])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        if self.eps.is_nan()
            || self.eps < 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::InvalidConfig(
                "eps and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vector,
    pub v: Vector,
    pub t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        AdamWState {
            m: Vector::zeros(len),
            v: Vector::zeros(len),
            t: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &[f64],
    grad: &[f64],
    state: &AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<(Vector, AdamWState)> {
    let mut params = Vector::from_vec(params.to_vec());
    let mut state = state.clone();
    adamw_step_in_place(&mut params, grad, &mut state, cfg, lr)?;
    Ok((params, state))
}

pub(crate) fn adamw_step_in_place(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    check_len(params.len(), grad.len())?;
    check_len(params.len(), state.m.len())?;
    check_len(params.len(), state.v.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let denom = v_hat.sqrt() + cfg.eps;
        // 0/0 only arises with eps = 0 and a zero history; the update is zero.
        let adaptive = if m_hat == 0.0 { 0.0 } else { m_hat / denom };
        params[i] -= lr * (adaptive + cfg.weight_decay * params[i]);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    CosineWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    /// Zero means "use the run's step count" when loaded from a config file.
    #[serde(default)]
    pub total_steps: usize,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_min_ratio")]
    pub min_ratio: f64,
}

fn default_warmup_frac() -> f64 {
    0.1
}

fn default_min_ratio() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(peak: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::Constant,
            peak,
            total_steps,
            warmup_frac: 0.0,
            min_ratio: 1.0,
        }
    }

    /// Cosine decay with the SFT defaults: 10% linear warmup, floor at 0.1 of peak.
    pub fn cosine_warmup(peak: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::CosineWarmup,
            peak,
            total_steps,
            warmup_frac: default_warmup_frac(),
            min_ratio: default_min_ratio(),
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.peak.is_finite() || self.peak <= 0.0 {
            return Err(Error::InvalidConfig("schedule peak must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig(
                "warmup_frac must lie in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_ratio) {
            return Err(Error::InvalidConfig("min_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn lr_at(sched: &LrSchedule, step: usize) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total_steps: sched.total_steps,
        });
    }
    match sched.kind {
        ScheduleKind::Constant => Ok(sched.peak),
        ScheduleKind::CosineWarmup => {
            let warmup = sched.warmup_steps();
            if step < warmup {
                return Ok(sched.peak * step as f64 / warmup as f64);
            }
            let span = sched.total_steps - warmup;
            let progress = if span == 0 {
                0.0
            } else {
                (step - warmup) as f64 / span as f64
            };
            let floor = sched.min_ratio * sched.peak;
            Ok(floor + (1.0 - sched.min_ratio) * sched.peak * 0.5 * (1.0 + (PI * progress).cos()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Kahan-Babuska summation, independent of the pairwise tree.
    fn compensated(values: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut c = 0.0f64;
        for &x in values {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                c += (sum - t) + x;
            } else {
                c += (x - t) + sum;
            }
            sum = t;
        }
        sum + c
    }

    #[test]
    fn stable_sum_small_cases() {
        assert_eq!(stable_sum(&[]).unwrap(), 0.0);
        assert_eq!(stable_sum(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 10.0);
    }

    #[test]
    fn stable_sum_rejects_non_finite() {
        assert!(matches!(
            stable_sum(&[1.0, f64::NAN]),
            Err(Error::NonFinite)
        ));
        assert!(matches!(
            stable_sum(&[f64::INFINITY]),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn stable_sum_million_tenths() {
        let values = vec![0.1; 1_000_000];
        let got = stable_sum(&values).unwrap();
        let oracle = compensated(&values);
        assert!((got - oracle).abs() / oracle <= 1e-9);
        assert!((got - 1e5).abs() / 1e5 <= 1e-9);
    }

    #[test]
    fn stable_sum_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(0..200);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let a = stable_sum(&v).unwrap();
            let b = stable_sum(&v.clone()).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let cfg = AdamWConfig::default();
        let (p, s) = adamw_step(&[1.0], &[0.0], &AdamWState::new(1), &cfg, 0.1).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adamw_first_step_is_unit_sign_step() {
        let cfg = AdamWConfig {
            eps: 0.0,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let (p, _) = adamw_step(&[0.0], &[1.0], &AdamWState::new(1), &cfg, 1.0).unwrap();
        assert!((p[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_errors() {
        let cfg = AdamWConfig::default();
        let st = AdamWState::new(2);
        assert!(matches!(
            adamw_step(&[0.0, 0.0], &[1.0], &st, &cfg, 0.1),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            adamw_step(&[0.0, 0.0], &[1.0, f64::NAN], &st, &cfg, 0.1),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        // Hand-rolled scalar AdamW, written out per step.
        fn scalar(theta: f64, grads: &[f64], lr: f64, c: &AdamWConfig) -> f64 {
            let (mut th, mut m, mut v) = (theta, 0.0f64, 0.0f64);
            for (k, g) in grads.iter().enumerate() {
                let t = (k + 1) as f64;
                m = c.beta1 * m + (1.0 - c.beta1) * g;
                v = c.beta2 * v + (1.0 - c.beta2) * g * g;
                let mh = m / (1.0 - c.beta1.powf(t));
                let vh = v / (1.0 - c.beta2.powf(t));
                th = th - lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * th);
            }
            th
        }
        let cfg = AdamWConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (p, s) = adamw_step(&theta, &g1, &AdamWState::new(n), &cfg, 0.01).unwrap();
        let (p, s) = adamw_step(&p, &g2, &s, &cfg, 0.01).unwrap();
        assert_eq!(s.t, 2);
        for i in 0..n {
            let want = scalar(theta[i], &[g1[i], g2[i]], 0.01, &cfg);
            assert!((p[i] - want).abs() <= 1e-12 * want.abs().max(1e-300));
        }
    }

    #[test]
    fn lr_examples() {
        let c = LrSchedule::constant(1e-6, 500);
        assert_eq!(lr_at(&c, 250).unwrap(), 1e-6);
        let s = LrSchedule::cosine_warmup(5e-5, 1000);
        assert_eq!(s.warmup_steps(), 100);
        assert!((lr_at(&s, 100).unwrap() - 5e-5).abs() < 1e-18);
        assert!((lr_at(&s, 1000).unwrap() - 5e-6).abs() < 1e-18);
        assert!((lr_at(&s, 550).unwrap() - 2.75e-5).abs() < 1e-18);
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert!(matches!(lr_at(&s, 1001), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn lr_continuous_at_warmup_and_monotone_after() {
        let s = LrSchedule::cosine_warmup(5e-5, 1000);
        let w = s.warmup_steps();
        let before = lr_at(&s, w - 1).unwrap();
        let at = lr_at(&s, w).unwrap();
        assert!((at - before) <= s.peak / w as f64 + 1e-18);
        let mut prev = at;
        for step in w + 1..=s.total_steps {
            let cur = lr_at(&s, step).unwrap();
            assert!(cur <= prev);
            prev = cur;
        }
    }

    proptest! {
        #[test]
        fn adamw_identity_without_gradient_or_decay(theta in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
            let g = vec![0.0; theta.len()];
            let (p, _) = adamw_step(&theta, &g, &AdamWState::new(theta.len()), &cfg, 0.5).unwrap();
            prop_assert_eq!(&p[..], &theta[..]);
        }

        #[test]
        fn adamw_commutes_with_concatenation(
            a in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
            b in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
        ) {
            let cfg = AdamWConfig::default();
            let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().cloned().unzip() };
            let (ta, ga) = split(&a);
            let (tb, gb) = split(&b);
            let (pa, _) = adamw_step(&ta, &ga, &AdamWState::new(ta.len()), &cfg, 0.1).unwrap();
            let (pb, _) = adamw_step(&tb, &gb, &AdamWState::new(tb.len()), &cfg, 0.1).unwrap();
            let theta: Vec<f64> = ta.iter().chain(&tb).cloned().collect();
            let grad: Vec<f64> = ga.iter().chain(&gb).cloned().collect();
            let (p, _) = adamw_step(&theta, &grad, &AdamWState::new(theta.len()), &cfg, 0.1).unwrap();
            let joined: Vec<f64> = pa.iter().chain(pb.iter()).cloned().collect();
            prop_assert_eq!(&p[..], &joined[..]);
        }
    }
}
