//! Advantage estimates and exponential sample weights.
//!
//! Both advantages are one-step TD estimates computed from the current value
//! tables, with the same terminal masking as the critic targets.

use serde::{Deserialize, Serialize};

use crate::dataset::RelabeledSample;
use crate::error::{DawogError, Result};
use crate::partition::PartitionConfig;
use crate::scalar::Scalar;
use crate::value::{region_step, RegionValueTable, ValueTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub beta: f64,
    pub beta_tilde: f64,
    pub clip_bound: f64,
    pub gamma: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            beta_tilde: 10.0,
            clip_bound: 10.0,
            gamma: 0.99,
        }
    }
}

impl WeightConfig {
    pub fn with_betas(beta: f64, beta_tilde: f64) -> Self {
        Self {
            beta,
            beta_tilde,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta_tilde >= 0.0) {
            return Err(DawogError::Config("beta coefficients must be non-negative".into()));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(DawogError::Config("clip bound M must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(DawogError::Config("gamma must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `r + gamma * (1 - d) * V(s', g) - V(s, g)`.
#[inline]
pub fn goal_advantage<T: Scalar>(smp: &RelabeledSample, vt: &ValueTable<T>, gamma: f64) -> T {
    let next = if smp.d {
        T::zero()
    } else {
        vt.value(smp.s_next, smp.g)
    };
    T::lit(f64::from(smp.r)) + T::lit(gamma) * next - vt.value(smp.s, smp.g)
}

/// `r~ + gamma * (1 - d~) * V~(s', G(s, g)) - V~(s, G(s, g))`, with the
/// target region taken from the current partition induced by `vt`.
#[inline]
pub fn region_advantage<T: Scalar>(
    smp: &RelabeledSample,
    rvt: &RegionValueTable<T>,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    gamma: f64,
) -> T {
    let step = region_step(vt, cfg, smp.s, smp.s_next, smp.g);
    let next = if step.reached() {
        T::zero()
    } else {
        rvt.value(smp.s_next, smp.g, step.target)
    };
    T::lit(f64::from(step.reward)) + T::lit(gamma) * next - rvt.value(smp.s, smp.g, step.target)
}

/// `min(exp(x), M)`, always in `(0, M]` for finite `x`.
#[inline]
pub fn exp_clip<T: Scalar>(x: T, bound: T) -> T {
    let w = x.exp().min(bound);
    // exp underflows to zero for very negative inputs
    if w > T::zero() {
        w
    } else {
        T::min_positive_value()
    }
}

/// `exp_clip(beta * A + beta~ * A~, M)`.
#[inline]
pub fn dual_weight<T: Scalar>(adv: T, region_adv: T, cfg: &WeightConfig) -> T {
    exp_clip(
        T::lit(cfg.beta) * adv + T::lit(cfg.beta_tilde) * region_adv,
        T::lit(cfg.clip_bound),
    )
}
