//! Tabular goal-conditioned and target-region value functions.
//!
//! Both tables keep a Polyak-averaged target copy that TD targets bootstrap
//! from; the copy only moves through [`Polyak::polyak_update`]. Entries
//! `(g, g)` are pinned to 1: an episode whose goal equals the current state
//! is an immediate success, and no TD target ever bootstraps through them
//! because reaching the goal terminates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RelabeledSample;
use crate::env::{Goal, LayoutId, StateId};
use crate::error::{DawogError, Result};
use crate::partition::{PartitionConfig, RegionIndex};
use crate::scalar::Scalar;
use crate::table_io::{sidecar_path, write_sidecar, TableBlob, TableKind};

pub const DEFAULT_VALUE_LEARNING_RATE: f64 = 0.5;
pub const DEFAULT_POLYAK_RHO: f64 = 0.05;

/// Slow-moving target copy: `target <- rho * values + (1 - rho) * target`.
pub trait Polyak {
    fn polyak_update(&mut self);
}

pub fn polyak_update<P: Polyak>(table: &mut P) {
    table.polyak_update();
}

fn polyak_mix<T: Scalar>(values: &[T], target: &mut [T], rho: f64) {
    let rho = T::lit(rho);
    let keep = T::one() - rho;
    for (t, &v) in target.iter_mut().zip(values) {
        *t = rho * v + keep * *t;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub kind: String,
    pub layout_id: LayoutId,
    pub num_states: usize,
    pub regions: Option<usize>,
    pub learning_rate: f64,
    pub polyak_rho: Option<f64>,
}

/// `V(s, g)`, stored row-major as `[s][g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable<T> {
    n: usize,
    values: Vec<T>,
    target_values: Vec<T>,
    pub polyak_rho: f64,
    pub learning_rate: f64,
}

impl<T: Scalar> ValueTable<T> {
    pub fn new(num_states: usize, learning_rate: f64, polyak_rho: f64) -> Self {
        let n = num_states;
        let mut values = vec![T::zero(); n * n];
        for s in 0..n {
            values[s * n + s] = T::one();
        }
        Self {
            n,
            target_values: values.clone(),
            values,
            polyak_rho,
            learning_rate,
        }
    }

    /// Off-diagonal entries drawn uniformly from `[0, scale)`.
    pub fn with_random_init(
        num_states: usize,
        learning_rate: f64,
        polyak_rho: f64,
        seed: u64,
        scale: f64,
    ) -> Self {
        let mut table = Self::new(num_states, learning_rate, polyak_rho);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = table.n;
        for (idx, v) in table.values.iter_mut().enumerate() {
            if idx / n != idx % n {
                *v = T::lit(rng.gen::<f64>() * scale).clamp_unit();
            }
        }
        table.target_values.clone_from(&table.values);
        table
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, s: StateId, g: Goal) -> usize {
        s.idx() * self.n + g.idx()
    }

    #[inline]
    pub fn value(&self, s: StateId, g: Goal) -> T {
        self.values[self.idx(s, g)]
    }

    #[inline]
    pub fn target_value(&self, s: StateId, g: Goal) -> T {
        self.target_values[self.idx(s, g)]
    }

    /// Sets an online entry (clamped). Diagonal entries stay pinned.
    pub fn set_value(&mut self, s: StateId, g: Goal, v: T) {
        if s != g.cell() {
            let i = self.idx(s, g);
            self.values[i] = v.clamp_unit();
        }
    }

    /// Copies the online values into the target copy.
    pub fn sync_target(&mut self) {
        self.target_values.clone_from(&self.values);
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn target_values(&self) -> &[T] {
        &self.target_values
    }

    pub fn to_blob(&self, layout: LayoutId) -> TableBlob {
        TableBlob {
            kind: TableKind::GoalValue,
            layout: layout.as_str().to_string(),
            dims: vec![self.n as u64, self.n as u64],
            blocks: vec![to_f64(&self.values), to_f64(&self.target_values)],
        }
    }

    pub fn from_blob(blob: &TableBlob, learning_rate: f64, polyak_rho: f64) -> Result<Self> {
        if blob.kind != TableKind::GoalValue || blob.dims.len() != 2 || blob.blocks.len() != 2 {
            return Err(DawogError::Shape("not a goal value table".into()));
        }
        if blob.dims[0] != blob.dims[1] {
            return Err(DawogError::Shape("goal value table must be square".into()));
        }
        Ok(Self {
            n: blob.dims[0] as usize,
            values: from_f64(&blob.blocks[0]),
            target_values: from_f64(&blob.blocks[1]),
            polyak_rho,
            learning_rate,
        })
    }

    pub fn save(&self, path: &Path, layout: LayoutId) -> Result<()> {
        self.to_blob(layout).save(path)?;
        write_sidecar(
            path,
            &TableMeta {
                kind: "goal_value".into(),
                layout_id: layout,
                num_states: self.n,
                regions: None,
                learning_rate: self.learning_rate,
                polyak_rho: Some(self.polyak_rho),
            },
        )
    }

    /// Reads a table written by [`ValueTable::save`]; hyperparameters come
    /// from the sidecar, or the defaults if it is missing.
    pub fn load(path: &Path) -> Result<Self> {
        let (lr, rho) = read_hyper(path);
        Self::from_blob(&TableBlob::load(path)?, lr, rho)
    }
}

impl<T: Scalar> Polyak for ValueTable<T> {
    fn polyak_update(&mut self) {
        polyak_mix(&self.values, &mut self.target_values, self.polyak_rho);
    }
}

/// `V~(s, g, k)` for target region `k`, stored row-major as `[s][g][k-1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionValueTable<T> {
    n: usize,
    regions: usize,
    values: Vec<T>,
    target_values: Vec<T>,
    pub polyak_rho: f64,
    pub learning_rate: f64,
}

impl<T: Scalar> RegionValueTable<T> {
    pub fn new(num_states: usize, regions: usize, learning_rate: f64, polyak_rho: f64) -> Self {
        let n = num_states;
        let mut values = vec![T::zero(); n * n * regions];
        // At the goal itself every target region is already reached.
        for s in 0..n {
            for k in 0..regions {
                values[(s * n + s) * regions + k] = T::one();
            }
        }
        Self {
            n,
            regions,
            target_values: values.clone(),
            values,
            polyak_rho,
            learning_rate,
        }
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    #[inline]
    fn idx(&self, s: StateId, g: Goal, k: RegionIndex) -> usize {
        (s.idx() * self.n + g.idx()) * self.regions + k.slot()
    }

    #[inline]
    pub fn value(&self, s: StateId, g: Goal, k: RegionIndex) -> T {
        self.values[self.idx(s, g, k)]
    }

    #[inline]
    pub fn target_value(&self, s: StateId, g: Goal, k: RegionIndex) -> T {
        self.target_values[self.idx(s, g, k)]
    }

    pub fn set_value(&mut self, s: StateId, g: Goal, k: RegionIndex, v: T) {
        if s != g.cell() {
            let i = self.idx(s, g, k);
            self.values[i] = v.clamp_unit();
        }
    }

    pub fn sync_target(&mut self) {
        self.target_values.clone_from(&self.values);
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn to_blob(&self, layout: LayoutId) -> TableBlob {
        TableBlob {
            kind: TableKind::RegionValue,
            layout: layout.as_str().to_string(),
            dims: vec![self.n as u64, self.n as u64, self.regions as u64],
            blocks: vec![to_f64(&self.values), to_f64(&self.target_values)],
        }
    }

    pub fn from_blob(blob: &TableBlob, learning_rate: f64, polyak_rho: f64) -> Result<Self> {
        if blob.kind != TableKind::RegionValue || blob.dims.len() != 3 || blob.blocks.len() != 2 {
            return Err(DawogError::Shape("not a region value table".into()));
        }
        Ok(Self {
            n: blob.dims[0] as usize,
            regions: blob.dims[2] as usize,
            values: from_f64(&blob.blocks[0]),
            target_values: from_f64(&blob.blocks[1]),
            polyak_rho,
            learning_rate,
        })
    }

    pub fn save(&self, path: &Path, layout: LayoutId) -> Result<()> {
        self.to_blob(layout).save(path)?;
        write_sidecar(
            path,
            &TableMeta {
                kind: "region_value".into(),
                layout_id: layout,
                num_states: self.n,
                regions: Some(self.regions),
                learning_rate: self.learning_rate,
                polyak_rho: Some(self.polyak_rho),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (lr, rho) = read_hyper(path);
        Self::from_blob(&TableBlob::load(path)?, lr, rho)
    }
}

impl<T: Scalar> Polyak for RegionValueTable<T> {
    fn polyak_update(&mut self) {
        polyak_mix(&self.values, &mut self.target_values, self.polyak_rho);
    }
}

fn read_hyper(path: &Path) -> (f64, f64) {
    std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|t| serde_json::from_str::<TableMeta>(&t).ok())
        .map_or((DEFAULT_VALUE_LEARNING_RATE, DEFAULT_POLYAK_RHO), |m| {
            (m.learning_rate, m.polyak_rho.unwrap_or(DEFAULT_POLYAK_RHO))
        })
}

pub(crate) fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

pub(crate) fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Target region and auxiliary reward of one transition, evaluated against
/// the current online goal values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionStep {
    pub current: RegionIndex,
    pub target: RegionIndex,
    /// Auxiliary reward; the target counts as reached iff this is 1.
    pub reward: u8,
}

impl RegionStep {
    #[inline]
    pub fn reached(&self) -> bool {
        self.reward == 1
    }
}

#[inline]
pub fn region_step<T: Scalar>(
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    s: StateId,
    s_next: StateId,
    g: Goal,
) -> RegionStep {
    let current = cfg.region_of(vt.value(s, g));
    let target = cfg.target_of(current);
    RegionStep {
        current,
        target,
        reward: cfg.reward(vt.value(s_next, g), target),
    }
}

/// One TD step on `V` for every sample of the batch:
/// `y = r + gamma * (1 - d) * V_target(s', g)`, `V(s, g) += lr * (y - V(s, g))`.
/// Returns the mean squared TD error measured before the update. Samples
/// with `s == g` are skipped (pinned entries).
pub fn td_update_goal_value<T: Scalar>(
    vt: &mut ValueTable<T>,
    batch: &[RelabeledSample],
    gamma: f64,
) -> f64 {
    let gamma = T::lit(gamma);
    let lr = T::lit(vt.learning_rate);
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut moves = Vec::with_capacity(batch.len());
    for smp in batch {
        if smp.s == smp.g.cell() {
            continue;
        }
        let bootstrap = if smp.d {
            T::zero()
        } else {
            vt.target_value(smp.s_next, smp.g)
        };
        let y = T::lit(f64::from(smp.r)) + gamma * bootstrap;
        let err = y - vt.value(smp.s, smp.g);
        sq += err.as_f64() * err.as_f64();
        count += 1;
        moves.push((vt.idx(smp.s, smp.g), y));
    }
    for (i, y) in moves {
        let v = vt.values[i];
        vt.values[i] = (v + lr * (y - v)).clamp_unit();
    }
    if count == 0 {
        0.0
    } else {
        sq / count as f64
    }
}

/// One TD step on `V~` for every sample, with the target region and
/// auxiliary reward computed from the current `vt`:
/// `y~ = r~ + gamma * (1 - d~) * V~_target(s', g, G(s, g))`.
pub fn td_update_region_value<T: Scalar>(
    rvt: &mut RegionValueTable<T>,
    batch: &[RelabeledSample],
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    gamma: f64,
) -> f64 {
    debug_assert_eq!(rvt.regions, cfg.regions);
    let gamma = T::lit(gamma);
    let lr = T::lit(rvt.learning_rate);
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut moves = Vec::with_capacity(batch.len());
    for smp in batch {
        if smp.s == smp.g.cell() {
            continue;
        }
        let step = region_step(vt, cfg, smp.s, smp.s_next, smp.g);
        let bootstrap = if step.reached() {
            T::zero()
        } else {
            rvt.target_value(smp.s_next, smp.g, step.target)
        };
        let y = T::lit(f64::from(step.reward)) + gamma * bootstrap;
        let err = y - rvt.value(smp.s, smp.g, step.target);
        sq += err.as_f64() * err.as_f64();
        count += 1;
        moves.push((rvt.idx(smp.s, smp.g, step.target), y));
    }
    for (i, y) in moves {
        let v = rvt.values[i];
        rvt.values[i] = (v + lr * (y - v)).clamp_unit();
    }
    if count == 0 {
        0.0
    } else {
        sq / count as f64
    }
}
