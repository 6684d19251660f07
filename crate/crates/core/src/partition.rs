//! Value-based partition of the state space.
//!
//! For a fixed goal, states are grouped by which of `K` equal sub-intervals
//! of `[0, 1]` their goal-conditioned value falls into. Region indices are
//! 1-based; region `K` contains value `1.0`. The target region of a state is
//! the next region up (clamped at `K`), and the auxiliary reward pays 1 when
//! the next state lands in it.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{DawogError, Result};
use crate::scalar::Scalar;

/// How the auxiliary reward tests region membership.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Next region index at least the target index.
    #[default]
    AtLeast,
    /// Next region index equal to the target index.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub regions: usize,
    /// How many regions above the current one the target sits.
    pub target_offset: usize,
    pub membership: Membership,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            regions: 10,
            target_offset: 1,
            membership: Membership::AtLeast,
        }
    }
}

impl PartitionConfig {
    pub fn with_regions(regions: usize) -> Self {
        Self {
            regions,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 {
            return Err(DawogError::Config("region count K must be at least 1".into()));
        }
        if self.target_offset == 0 {
            return Err(DawogError::Config("target offset must be at least 1".into()));
        }
        Ok(())
    }

    /// Region of value `v`.
    #[inline]
    pub fn region_of<T: Scalar>(&self, v: T) -> RegionIndex {
        region_of(v, self)
    }

    /// Target region of a state currently in region `k`.
    #[inline]
    pub fn target_of(&self, k: RegionIndex) -> RegionIndex {
        target_region(k, self, self.target_offset)
    }

    /// Auxiliary reward for a transition whose next state has value
    /// `next_value`, given the target computed from the current state.
    #[inline]
    pub fn reward<T: Scalar>(&self, next_value: T, target: RegionIndex) -> u8 {
        region_reward(next_value, target, self)
    }
}

/// 1-based region index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionIndex(pub u32);

impl RegionIndex {
    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Zero-based position, for table indexing.
    #[inline]
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }
}

static CLAMPED_VALUES: AtomicU64 = AtomicU64::new(0);

/// Number of values that fell outside `[0, 1]` and were clamped before
/// binning, since process start or the last reset.
pub fn clamped_value_count() -> u64 {
    CLAMPED_VALUES.load(Ordering::Relaxed)
}

pub fn reset_clamped_value_count() {
    CLAMPED_VALUES.store(0, Ordering::Relaxed);
}

/// `min(floor(v * K) + 1, K)` after clamping `v` into `[0, 1]`.
#[inline]
pub fn region_of<T: Scalar>(v: T, cfg: &PartitionConfig) -> RegionIndex {
    let k = cfg.regions;
    let mut v = v.as_f64();
    if !(0.0..=1.0).contains(&v) {
        CLAMPED_VALUES.fetch_add(1, Ordering::Relaxed);
        v = if v > 1.0 { 1.0 } else { 0.0 };
    }
    let bin = (v * k as f64).floor() as usize + 1;
    RegionIndex(bin.min(k) as u32)
}

/// `min(k + offset, K)`.
#[inline]
pub fn target_region(k: RegionIndex, cfg: &PartitionConfig, offset: usize) -> RegionIndex {
    RegionIndex((k.get() + offset).min(cfg.regions) as u32)
}

#[inline]
pub fn region_reward<T: Scalar>(next_value: T, target: RegionIndex, cfg: &PartitionConfig) -> u8 {
    let next = region_of(next_value, cfg);
    let hit = match cfg.membership {
        Membership::AtLeast => next >= target,
        Membership::Exact => next == target,
    };
    u8::from(hit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k10() -> PartitionConfig {
        PartitionConfig::default()
    }

    #[test]
    fn binning_boundaries() {
        assert_eq!(region_of(0.0, &k10()), RegionIndex(1));
        assert_eq!(region_of(1.0, &k10()), RegionIndex(10));
        assert_eq!(region_of(0.485, &k10()), RegionIndex(5));
        assert_eq!(region_of(0.4, &k10()), RegionIndex(5));
        assert_eq!(region_of(0.3999, &k10()), RegionIndex(4));
        assert_eq!(region_of(0.95f32, &k10()), RegionIndex(10));
    }

    #[test]
    fn out_of_range_values_clamp() {
        let before = clamped_value_count();
        assert_eq!(region_of(-0.2, &k10()), RegionIndex(1));
        assert_eq!(region_of(1.7, &k10()), RegionIndex(10));
        assert!(clamped_value_count() >= before + 2);
    }

    #[test]
    fn target_region_cases() {
        let cfg = k10();
        assert_eq!(target_region(RegionIndex(10), &cfg, 1), RegionIndex(10));
        assert_eq!(target_region(RegionIndex(3), &cfg, 1), RegionIndex(4));
        assert_eq!(target_region(RegionIndex(8), &cfg, 5), RegionIndex(10));
    }

    #[test]
    fn region_reward_cases() {
        let cfg = k10();
        let target = cfg.target_of(cfg.region_of(0.35)); // region 4 -> 5
        assert_eq!(target, RegionIndex(5));
        assert_eq!(region_reward(0.45, target, &cfg), 1);
        assert_eq!(region_reward(0.38, target, &cfg), 0);
        // overshoot by one region
        assert_eq!(region_reward(0.55, target, &cfg), 1);
        let exact = PartitionConfig {
            membership: Membership::Exact,
            ..cfg
        };
        assert_eq!(region_reward(0.55, target, &exact), 0);
        assert_eq!(region_reward(0.45, target, &exact), 1);
        // top region targets itself
        let top = cfg.target_of(RegionIndex(10));
        assert_eq!(region_reward(0.97, top, &cfg), 1);
    }

    #[test]
    fn single_region_degenerates() {
        let cfg = PartitionConfig::with_regions(1);
        assert_eq!(region_of(0.0, &cfg), RegionIndex(1));
        assert_eq!(region_of(1.0, &cfg), RegionIndex(1));
        assert_eq!(cfg.target_of(RegionIndex(1)), RegionIndex(1));
        assert_eq!(region_reward(0.0, RegionIndex(1), &cfg), 1);
    }

    #[test]
    fn config_validation() {
        assert!(PartitionConfig::with_regions(0).validate().is_err());
        let cfg = PartitionConfig {
            target_offset: 0,
            ..k10()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn binning_is_monotone_and_total(a in 0.0f64..=1.0, b in 0.0f64..=1.0, k in 1usize..60) {
            let cfg = PartitionConfig::with_regions(k);
            let (ra, rb) = (region_of(a, &cfg), region_of(b, &cfg));
            prop_assert!(ra.get() >= 1 && ra.get() <= k);
            if a <= b {
                prop_assert!(ra <= rb);
            }
            // the bin actually contains the value
            let lo = (ra.get() - 1) as f64 / k as f64;
            let hi = ra.get() as f64 / k as f64;
            prop_assert!(a >= lo - 1e-12 && (a < hi || ra.get() == k));
        }

        #[test]
        fn target_is_monotone_and_idempotent_at_top(k in 1usize..40, off in 1usize..12) {
            let cfg = PartitionConfig::with_regions(k);
            for j in 1..k {
                let lo = target_region(RegionIndex(j as u32), &cfg, off);
                let hi = target_region(RegionIndex(j as u32 + 1), &cfg, off);
                prop_assert!(lo <= hi);
                prop_assert!(lo.get() > j);
            }
            let top = RegionIndex(k as u32);
            prop_assert_eq!(target_region(top, &cfg, off), top);
        }
    }

    #[test]
    fn binning_is_surjective() {
        for k in [1usize, 3, 10, 50] {
            let cfg = PartitionConfig::with_regions(k);
            let mut seen = vec![false; k];
            for i in 0..=10_000 {
                seen[region_of(i as f64 / 10_000.0, &cfg).slot()] = true;
            }
            assert!(seen.iter().all(|&s| s), "K={k}");
        }
    }
}
