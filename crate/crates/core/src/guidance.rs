//! Mentor action-guidance objectives.
//!
//! Value-margin regularization (VMR) lifts the critic's estimate of mentor
//! actions above the replayed action by a margin. Advantage-weighted action
//! guidance (AWAG) raises the policy likelihood of mentor actions the critic
//! already prefers. Both are weighted by cosine-decayed coefficients.
//!
//! The kernels here operate on per-sample critic outputs so they can be
//! checked by hand; [`crate::learner`] wires them to networks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    InvalidConfig(String),
    #[error("schedule horizon must be positive")]
    NonPositiveHorizon,
    #[error("schedule exponent must be positive")]
    NonPositiveExponent,
    #[error("advantage-weighted guidance needs a stochastic policy")]
    DeterministicPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub vmr_enabled: bool,
    pub awag_enabled: bool,
    /// Margin in Q units.
    pub delta: f64,
    pub vmr_start: f64,
    pub vmr_end: f64,
    pub vmr_exponent: f64,
    pub awag_start: f64,
    pub awag_end: f64,
    pub awag_exponent: f64,
    /// Decay horizon in learner steps. Zero means half of the run's total steps.
    pub horizon: u64,
    pub alpha: f64,
    pub eps: f64,
    pub beta: f64,
    pub w_max: f64,
    pub awag_decay_enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            vmr_enabled: false,
            awag_enabled: false,
            delta: 0.1,
            vmr_start: 1.0,
            vmr_end: 0.0,
            vmr_exponent: 2.0,
            awag_start: 1.0,
            awag_end: 0.0,
            awag_exponent: 3.0,
            horizon: 0,
            alpha: 1.0,
            eps: 1e-6,
            beta: 2.0,
            w_max: 20.0,
            awag_decay_enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: &str| Err(GuidanceError::InvalidConfig(m.to_string()));
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.w_max >= 1.0) {
            return bad("w_max must be at least 1");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.vmr_start >= self.vmr_end && self.vmr_end >= 0.0) {
            return bad("vmr schedule needs start >= end >= 0");
        }
        if !(self.awag_start >= self.awag_end && self.awag_end >= 0.0) {
            return bad("awag schedule needs start >= end >= 0");
        }
        if !(self.vmr_exponent > 0.0 && self.awag_exponent > 0.0) {
            return bad("schedule exponents must be positive");
        }
        Ok(())
    }

    /// Horizon resolved against the run length.
    pub fn resolved_horizon(&self, total_steps: u64) -> u64 {
        if self.horizon > 0 {
            self.horizon
        } else {
            (total_steps / 2).max(1)
        }
    }

    /// VMR coefficient at `step`, or zero when VMR is off.
    pub fn vmr_coeff(&self, step: u64, horizon: u64) -> f64 {
        if !self.vmr_enabled {
            return 0.0;
        }
        cosine_coeff(step, self.vmr_start, self.vmr_end, horizon, self.vmr_exponent).unwrap_or(self.vmr_end)
    }

    /// AWAG coefficient at `step`, or zero when AWAG is off.
    pub fn awag_coeff(&self, step: u64, horizon: u64) -> f64 {
        if !self.awag_enabled {
            return 0.0;
        }
        if !self.awag_decay_enabled {
            return self.awag_start;
        }
        cosine_coeff(step, self.awag_start, self.awag_end, horizon, self.awag_exponent).unwrap_or(self.awag_end)
    }
}

/// Cosine-decayed coefficient: `end + (start - end) * (1 + cos(pi * p^k)) / 2`
/// with `p = min(step / horizon, 1)`.
pub fn cosine_coeff(step: u64, start: f64, end: f64, horizon: u64, exponent: f64) -> Result<f64, GuidanceError> {
    if horizon == 0 {
        return Err(GuidanceError::NonPositiveHorizon);
    }
    if !(exponent > 0.0) {
        return Err(GuidanceError::NonPositiveExponent);
    }
    if step >= horizon {
        return Ok(end);
    }
    let p = (step as f64 / horizon as f64).powf(exponent);
    Ok(end + (start - end) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0)
}

/// TD regression summed over both heads: `sum_i 0.5 * mean (q_i - y)^2`.
pub fn td_loss(q: [&[f64]; 2], y: &[f64]) -> f64 {
    q.iter()
        .map(|qi| 0.5 * qi.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
        .sum()
}

/// Derivative of [`td_loss`] with respect to one head's outputs.
pub fn td_loss_grad(q: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    q.iter().zip(y).map(|(a, b)| (a - b) / n).collect()
}

/// Value-margin loss summed over both heads. `q_data` holds the critic on
/// replayed actions and is treated as a constant.
pub fn vmr_loss(q_vlm: [&[f64]; 2], q_data: [&[f64]; 2], mask: &[f64], delta: f64) -> f64 {
    (0..2)
        .map(|i| {
            let n = mask.len() as f64;
            q_vlm[i]
                .iter()
                .zip(q_data[i])
                .zip(mask)
                .map(|((v, d), m)| if *m > 0.0 { m * (v - (d + delta)).powi(2) } else { 0.0 })
                .sum::<f64>()
                / n
        })
        .sum()
}

/// Derivative of [`vmr_loss`] with respect to one head's mentor-action outputs.
pub fn vmr_loss_grad(q_vlm: &[f64], q_data: &[f64], mask: &[f64], delta: f64) -> Vec<f64> {
    let n = mask.len() as f64;
    q_vlm
        .iter()
        .zip(q_data)
        .zip(mask)
        .map(|((v, d), m)| if *m > 0.0 { 2.0 * m * (v - (d + delta)) / n } else { 0.0 })
        .collect()
}

pub fn critic_total(td: f64, vmr: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        td
    } else {
        td + lambda * vmr
    }
}

/// Critic normalization scale: `alpha / (mean |q1| + eps)`.
pub fn awag_scale(q1_data: &[f64], alpha: f64, eps: f64) -> f64 {
    let mean_abs = q1_data.iter().map(|q| q.abs()).sum::<f64>() / q1_data.len().max(1) as f64;
    alpha / (mean_abs + eps)
}

/// Base actor objective `-mean(scale * min_i q_i)`.
pub fn actor_base_loss(q_pi: [&[f64]; 2], scale: f64) -> f64 {
    let n = q_pi[0].len() as f64;
    -scale * q_pi[0].iter().zip(q_pi[1]).map(|(a, b)| a.min(*b)).sum::<f64>() / n
}

/// Advantage of the mentor action over the policy action, and its gate.
pub fn awag_advantage(q_vlm: (f64, f64), q_pi: (f64, f64)) -> (f64, bool) {
    let a = q_vlm.0.min(q_vlm.1) - q_pi.0.min(q_pi.1);
    (a, a > 0.0)
}

pub fn awag_weight(advantage: f64, beta: f64, w_max: f64) -> f64 {
    (advantage / beta).exp().min(w_max)
}

/// `-mean(m * g * w * log_prob)`.
pub fn awag_loss(mask: &[f64], gate: &[bool], weight: &[f64], log_prob: &[f64]) -> f64 {
    let n = mask.len() as f64;
    -mask
        .iter()
        .zip(gate)
        .zip(weight)
        .zip(log_prob)
        .map(|(((m, g), w), lp)| if *g && *m > 0.0 { m * w * lp } else { 0.0 })
        .sum::<f64>()
        / n
}

pub fn actor_total(base: f64, awag: f64, iota: f64) -> f64 {
    if iota == 0.0 {
        base
    } else {
        base + iota * awag
    }
}

/// Per-update guidance scalars for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDiagnostics {
    pub vmr_loss: f64,
    pub awag_loss: f64,
    pub mean_advantage: f64,
    pub gate_fraction: f64,
    pub mean_weight: f64,
    pub lambda: f64,
    pub iota: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_coeff(0, 1.0, 0.0, 100, 2.0).unwrap(), 1.0);
        assert_eq!(cosine_coeff(100, 1.0, 0.0, 100, 2.0).unwrap(), 0.0);
        assert_eq!(cosine_coeff(500, 1.0, 0.2, 100, 2.0).unwrap(), 0.2);
        assert_abs_diff_eq!(cosine_coeff(50, 1.0, 0.0, 100, 1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(cosine_coeff(1, 1.0, 0.0, 0, 1.0), Err(GuidanceError::NonPositiveHorizon));
        assert_eq!(cosine_coeff(1, 1.0, 0.0, 10, 0.0), Err(GuidanceError::NonPositiveExponent));
    }

    #[test]
    fn larger_exponent_decays_slower_early() {
        let lin = cosine_coeff(10, 1.0, 0.0, 100, 1.0).unwrap();
        let sq = cosine_coeff(10, 1.0, 0.0, 100, 2.0).unwrap();
        assert!(sq > lin);
    }

    #[test]
    fn td_examples() {
        let y = [3.0];
        assert_eq!(td_loss([&[3.0], &[3.0]], &y), 0.0);
        assert_abs_diff_eq!(td_loss([&[4.0], &[2.0]], &y), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vmr_examples() {
        let single = vmr_loss([&[1.2], &[0.0]], [&[1.0], &[-0.5]], &[1.0], 0.5);
        assert_abs_diff_eq!(single, 0.09, epsilon = 1e-12);
        assert_eq!(vmr_loss([&[5.0, 1.0], &[2.0, 2.0]], [&[0.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0], 0.1), 0.0);
        assert_eq!(critic_total(2.0, 4.0, 0.25), 3.0);
        assert_eq!(critic_total(2.0, 4.0, 0.0), 2.0);
    }

    #[test]
    fn awag_examples() {
        assert_eq!(awag_advantage((1.0, 1.0), (1.0, 1.0)), (0.0, false));
        assert_eq!(awag_advantage((3.0, 3.0), (1.0, 1.0)), (2.0, true));
        assert_eq!(awag_advantage((5.0, 3.0), (2.0, 4.0)), (1.0, true));
        assert_eq!(awag_weight(0.0, 2.0, 20.0), 1.0);
        assert_abs_diff_eq!(awag_weight(2.0, 2.0, 20.0), std::f64::consts::E, epsilon = 1e-12);
        assert_eq!(awag_weight(20.0, 2.0, 20.0), 20.0);
        assert_abs_diff_eq!(awag_loss(&[1.0], &[true], &[2.0], &[-1.5]), 3.0, epsilon = 1e-12);
        assert_eq!(awag_loss(&[1.0, 1.0], &[false, false], &[2.0, 3.0], &[-1.0, -2.0]), 0.0);
        assert_eq!(actor_total(-1.0, 2.0, 0.5), 0.0);
    }

    #[test]
    fn scale_examples() {
        assert_abs_diff_eq!(awag_scale(&[4.0, -4.0], 1.0, 0.0), 0.25, epsilon = 1e-12);
        let q = [1.0, 3.0];
        let q2 = [2.0, 6.0];
        let l1 = actor_base_loss([&q, &q], awag_scale(&q, 1.0, 0.0));
        let l2 = actor_base_loss([&q2, &q2], awag_scale(&q2, 1.0, 0.0));
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
        assert_eq!(actor_base_loss([&[2.0, 2.0], &[3.0, 2.0]], 1.0), -2.0);
    }

    #[test]
    fn decay_disabled_holds_start() {
        let cfg = GuidanceConfig { awag_enabled: true, awag_decay_enabled: false, awag_start: 0.7, ..Default::default() };
        for s in [0, 10, 1000, 10_000] {
            assert_eq!(cfg.awag_coeff(s, 100), 0.7);
        }
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { w_max: 0.5, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { vmr_start: 0.0, vmr_end: 1.0, ..Default::default() }.validate().is_err());
    }
}
