//! Clipped policy-gradient updates for the controller.

use serde::{Deserialize, Serialize};

use super::controller::{ControllerPolicy, Rollout};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub update_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub baseline_decay: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            update_epochs: 4,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            baseline_decay: 0.95,
            entropy_coef: 0.01,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must be in (0, 1)");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must be in [0, 1)");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("entropy_coef must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &PpoConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] += cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Exponential moving average of batch-mean reward; seeded by the first batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
}

impl Baseline {
    /// Folds in a batch and returns the baseline to subtract from it.
    pub fn update(&mut self, rewards: &[f64], decay: f64) -> f64 {
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let v = match self.value {
            None => mean,
            Some(b) => decay * b + (1.0 - decay) * mean,
        };
        self.value = Some(v);
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: Vec<f64>,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
    pub approx_kl: f64,
    pub aborted: bool,
}

/// Clipped surrogate plus entropy bonus, averaged over the batch, and its gradient.
///
/// `old_log_probs[j][t]` are the behaviour-policy log-probabilities of the sampled tokens.
pub fn objective_and_grad(
    policy: &ControllerPolicy,
    batch: &[Vec<usize>],
    old_log_probs: &[Vec<f64>],
    advantages: &[f64],
    cfg: &PpoConfig,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut grad = vec![0.0; policy.n_params()];
    let b = batch.len() as f64;
    let mut obj = 0.0;
    let mut clipped = 0usize;
    let mut total = 0usize;
    for ((tokens, old), &adv) in batch.iter().zip(old_log_probs).zip(advantages) {
        let roll: Rollout = policy.evaluate(tokens)?;
        let ent = roll.entropies();
        let mut dlogits = Vec::with_capacity(tokens.len());
        for (t, step) in roll.steps.iter().enumerate() {
            let tok = tokens[t];
            let ratio = (step.log_probs[tok] - old[t]).exp();
            let lo = 1.0 - cfg.clip_epsilon;
            let hi = 1.0 + cfg.clip_epsilon;
            let surr = (ratio * adv).min(ratio.clamp(lo, hi) * adv);
            obj += surr + cfg.entropy_coef * ent[t];
            // Unclipped branch carries gradient only while it is the active minimum.
            let active = (adv > 0.0 && ratio <= hi) || (adv < 0.0 && ratio >= lo);
            total += 1;
            if !active && adv != 0.0 {
                clipped += 1;
            }
            let coef = if active { adv * ratio } else { 0.0 };
            let d: Vec<f64> = step
                .probs
                .iter()
                .enumerate()
                .map(|(k, &pk)| {
                    let onehot = if k == tok { 1.0 } else { 0.0 };
                    let pg = coef * (onehot - pk);
                    let dent = -pk * (step.log_probs[k] + ent[t]);
                    (pg + cfg.entropy_coef * dent) / b
                })
                .collect();
            dlogits.push(d);
        }
        policy.backward(&roll, &dlogits, &mut grad);
    }
    Ok((obj / b, grad, clipped as f64 / total.max(1) as f64))
}

/// Runs `update_epochs` Adam ascent steps on the clipped objective. A non-finite
/// objective or gradient restores the policy and optimizer to their entry state.
pub fn ppo_update(
    policy: &mut ControllerPolicy,
    adam: &mut Adam,
    batch: &[Vec<usize>],
    old_log_probs: &[Vec<f64>],
    advantages: &[f64],
    cfg: &PpoConfig,
) -> Result<UpdateStats> {
    if batch.is_empty() || batch.len() != old_log_probs.len() || batch.len() != advantages.len() {
        return Err(Error::Shape("batch, log-prob and advantage lengths differ".into()));
    }
    let saved = (policy.params.clone(), adam.clone());
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.update_epochs {
        let (obj, grad, clip) = objective_and_grad(policy, batch, old_log_probs, advantages, cfg)?;
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            policy.params = saved.0;
            *adam = saved.1;
            stats.aborted = true;
            log::warn!("controller update produced non-finite values; keeping previous policy");
            return Ok(stats);
        }
        stats.objective.push(obj);
        stats.clip_fraction = clip;
        adam.step(&mut policy.params, &grad, cfg);
    }
    if !policy.is_finite() {
        policy.params = saved.0;
        *adam = saved.1;
        stats.aborted = true;
        return Ok(stats);
    }
    let mut kl = 0.0;
    let mut ent = 0.0;
    let mut n = 0.0;
    for (tokens, old) in batch.iter().zip(old_log_probs) {
        let roll = policy.evaluate(tokens)?;
        for (lp, o) in roll.token_log_probs().iter().zip(old) {
            kl += o - lp;
        }
        ent += roll.entropies().iter().sum::<f64>();
        n += tokens.len() as f64;
    }
    stats.approx_kl = kl / batch.len() as f64;
    stats.mean_entropy = ent / n;
    Ok(stats)
}
