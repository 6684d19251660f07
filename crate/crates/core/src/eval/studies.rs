//! Diagnostic studies: region occupancy times, value estimation bias,
//! ten-step target-region success, target-offset ablation and the
//! K / beta sensitivity sweep.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::OfflineDataset;
use crate::env::{Action, Goal, GridWorld, StateId};
use crate::error::{DawogError, Result};
use crate::eval::oracle::{self, GoalMdp, PolicyTable};
use crate::eval::rollout::{episode_task, evaluate, EvalConfig, EvalReport};
use crate::partition::{Membership, PartitionConfig, RegionIndex};
use crate::policy::{Controller, TabularPolicy};
use crate::rng;
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig, TrainOutcome, TrainerVariant, VariantKind};
use crate::value::{RegionValueTable, ValueTable};
use crate::weighting::WeightConfig;

/// Action choice that may consume randomness.
pub trait Actor: Sync {
    fn choose(&self, s: StateId, g: Goal, rng: &mut ChaCha8Rng) -> Action;
}

/// Greedy actions of a deterministic controller.
pub struct Greedy<'a, C: ?Sized>(pub &'a C);

impl<C: Controller + Sync + ?Sized> Actor for Greedy<'_, C> {
    fn choose(&self, s: StateId, g: Goal, _: &mut ChaCha8Rng) -> Action {
        self.0.act(s, g)
    }
}

/// Actions sampled from a dense probability table.
pub struct Sampled<'a>(pub &'a PolicyTable);

impl Actor for Sampled<'_> {
    fn choose(&self, s: StateId, g: Goal, rng: &mut ChaCha8Rng) -> Action {
        sample_row(self.0.probs(s.idx(), g.idx()), rng.gen())
    }
}

#[inline]
fn sample_row(p: &[f64], u: f64) -> Action {
    let mut acc = 0.0;
    for (a, &pa) in p.iter().enumerate() {
        acc += pa;
        if u < acc {
            return Action::from_index(a);
        }
    }
    // rounding can leave `acc` just below 1
    let last = p.iter().rposition(|&x| x > 0.0).unwrap_or(Action::COUNT - 1);
    Action::from_index(last)
}

#[inline]
fn region<T: Scalar>(vt: &ValueTable<T>, cfg: &PartitionConfig, s: StateId, g: Goal) -> usize {
    cfg.region_of(vt.value(s, g)).get()
}

#[inline]
fn in_target(r: usize, target: usize, membership: Membership) -> bool {
    match membership {
        Membership::AtLeast => r >= target,
        Membership::Exact => r == target,
    }
}

// ---------------------------------------------------------------------------
// Occupancy

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RegionOccupancy {
    pub region: usize,
    pub mean_steps: f64,
    pub passages: usize,
    /// Passages cut off by the horizon; included with their partial length.
    pub censored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupancyReport {
    /// One entry per region index `1..=K`; regions never entered have zero
    /// passages.
    pub per_region: Vec<RegionOccupancy>,
}

impl OccupancyReport {
    /// Mean over the regions with at least one passage in both reports of
    /// the per-region mean occupancy, for `self` and `other`.
    pub fn paired_aggregate(&self, other: &OccupancyReport) -> (f64, f64) {
        let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
        for (x, y) in self.per_region.iter().zip(&other.per_region) {
            if x.passages > 0 && y.passages > 0 {
                a += x.mean_steps;
                b += y.mean_steps;
                n += 1;
            }
        }
        if n == 0 {
            (0.0, 0.0)
        } else {
            (a / n as f64, b / n as f64)
        }
    }
}

/// One passage: steps spent after entering `region` until the region index
/// first exceeds it or the goal is reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Passage {
    pub region: usize,
    pub steps: u32,
    pub censored: bool,
}

/// Region passages of one rollout under the partition induced by `vt`.
pub fn passages<A: Actor + ?Sized, T: Scalar>(
    actor: &A,
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    start: StateId,
    goal: Goal,
    rng: &mut ChaCha8Rng,
) -> Vec<Passage> {
    let mut out = Vec::new();
    if start == goal.cell() {
        return out;
    }
    let mut s = start;
    let mut entry = region(vt, cfg, s, goal);
    let mut steps = 0u32;
    for _ in 0..env.max_episode_steps() {
        s = env.next_state(s, actor.choose(s, goal, rng));
        steps += 1;
        let r = region(vt, cfg, s, goal);
        if s == goal.cell() || r > entry {
            out.push(Passage {
                region: entry,
                steps,
                censored: false,
            });
            if s == goal.cell() {
                return out;
            }
            entry = r;
            steps = 0;
        }
    }
    if steps > 0 {
        out.push(Passage {
            region: entry,
            steps,
            censored: true,
        });
    }
    out
}

/// Occupancy times over explicit `(start, goal)` tasks; task `i` uses its
/// own random stream so different actors see identical tasks.
pub fn occupancy_on_tasks<A: Actor + ?Sized, T: Scalar>(
    actor: &A,
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    tasks: &[(StateId, Goal)],
    seed: u64,
) -> OccupancyReport {
    let parent = rng::derive_seed(seed, "occupancy");
    let all: Vec<Passage> = tasks
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &(s, g))| {
            let mut rng = rng::child_stream(parent, i as u64);
            passages(actor, env, vt, cfg, s, g, &mut rng)
        })
        .collect();
    let mut per_region: Vec<RegionOccupancy> = (1..=cfg.regions)
        .map(|region| RegionOccupancy {
            region,
            ..Default::default()
        })
        .collect();
    for p in &all {
        let slot = &mut per_region[p.region - 1];
        slot.mean_steps += f64::from(p.steps);
        slot.passages += 1;
        slot.censored += usize::from(p.censored);
    }
    for slot in &mut per_region {
        if slot.passages > 0 {
            slot.mean_steps /= slot.passages as f64;
        }
    }
    OccupancyReport { per_region }
}

/// Occupancy times of greedy rollouts on the evaluation tasks of `seed`.
pub fn occupancy_times<C: Controller + Sync + ?Sized, T: Scalar>(
    ctrl: &C,
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    episodes: usize,
    seed: u64,
) -> OccupancyReport {
    let tasks: Vec<_> = (0..episodes as u64).map(|i| episode_task(env, seed, i)).collect();
    occupancy_on_tasks(&Greedy(ctrl), env, vt, cfg, &tasks, seed)
}

// ---------------------------------------------------------------------------
// Ten-step target-region success

/// Uniform `(s, g)` pairs with `s != g` and `s` below the top region.
pub fn sample_region_pairs<T: Scalar>(
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    count: usize,
    seed: u64,
) -> Vec<(StateId, Goal)> {
    let n = env.num_states();
    let mut rng = rng::stream(seed, "region_pairs");
    let mut pairs = Vec::with_capacity(count);
    // the top region can cover every state for some goals; cap the attempts
    let mut attempts = 0usize;
    while pairs.len() < count && attempts < count * 1000 {
        attempts += 1;
        let g = Goal(StateId(rng.gen_range(0..n) as u32));
        let s = StateId(rng.gen_range(0..n) as u32);
        if s != g.cell() && region(vt, cfg, s, g) < cfg.regions {
            pairs.push((s, g));
        }
    }
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionSuccess {
    pub pairs: usize,
    pub successes: usize,
    /// Percentage in `[0, 100]`.
    pub success_rate: f64,
}

/// Whether greedy rollouts from each pair enter the target region of its
/// start state within `steps` steps.
pub fn region_success<C: Controller + Sync + ?Sized, T: Scalar>(
    ctrl: &C,
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    pairs: &[(StateId, Goal)],
    steps: usize,
) -> RegionSuccess {
    let successes = pairs
        .par_iter()
        .filter(|&&(s0, g)| {
            let target = cfg.target_of(cfg.region_of(vt.value(s0, g))).get();
            let mut s = s0;
            for _ in 0..steps {
                s = env.next_state(s, ctrl.act(s, g));
                if in_target(region(vt, cfg, s, g), target, cfg.membership) {
                    return true;
                }
            }
            false
        })
        .count();
    RegionSuccess {
        pairs: pairs.len(),
        successes,
        success_rate: 100.0 * successes as f64 / pairs.len().max(1) as f64,
    }
}

pub const REGION_SUCCESS_STEPS: usize = 10;

/// BFS distance from every state to the target region of `(s0, g)`.
pub fn distance_to_target_region<T: Scalar>(
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    s0: StateId,
    g: Goal,
) -> Vec<Option<u32>> {
    let target = cfg.target_of(cfg.region_of(vt.value(s0, g))).get();
    let n = env.num_states();
    let mut dist = vec![None; n];
    let mut queue = VecDeque::new();
    for s in env.state_ids() {
        if in_target(region(vt, cfg, s, g), target, cfg.membership) {
            dist[s.idx()] = Some(0);
            queue.push_back(s);
        }
    }
    // moves between free cells are reversible, so forward BFS from the set
    // gives distances into it
    while let Some(u) = queue.pop_front() {
        let d = dist[u.idx()].unwrap();
        for a in Action::ALL {
            let v = env.next_state(u, a);
            if dist[v.idx()].is_none() {
                dist[v.idx()] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

// ---------------------------------------------------------------------------
// Estimation bias

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub goals_per_separation: usize,
    pub mc_rollouts: usize,
    /// Replaces the Monte-Carlo estimates by exact truncated-horizon values.
    pub exact: bool,
    pub gamma: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            goals_per_separation: 1000,
            mc_rollouts: 1000,
            exact: false,
            gamma: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorStats {
    pub samples: usize,
    pub mean_error: f64,
    pub mean_abs_error: f64,
    /// Population standard deviation of the signed errors.
    pub std_error: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        let n = errors.len();
        if n == 0 {
            return Self::default();
        }
        let mean = errors.iter().sum::<f64>() / n as f64;
        let mean_abs = errors.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            samples: n,
            mean_error: mean,
            mean_abs_error: mean_abs,
            std_error: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparationBias {
    /// Number of regions between the sampled state and the goal's region;
    /// separation 1 samples from the top region.
    pub separation: usize,
    pub skipped_goals: usize,
    pub goal_value: ErrorStats,
    pub region_value: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub per_region_gap: Vec<SeparationBias>,
    pub goal_value: ErrorStats,
    pub region_value: ErrorStats,
}

/// Sampled `(s, g)` for separation `k`: a uniform goal, then a uniform
/// state `s != g` in region `K - k + 1` of the partition induced by `vt`.
fn bias_sample<T: Scalar>(
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(StateId, Goal)> {
    let n = env.num_states();
    let g = Goal(StateId(rng.gen_range(0..n) as u32));
    let want = cfg.regions + 1 - k;
    let members: Vec<StateId> = env
        .state_ids()
        .filter(|&s| s != g.cell() && region(vt, cfg, s, g) == want)
        .collect();
    (!members.is_empty()).then(|| members[rng.gen_range(0..members.len())])
        .map(|s| (s, g))
}

/// Monte-Carlo goal and target-region returns from `s` under `actor`,
/// with the target region taken from the partition induced by `vt`.
pub fn monte_carlo_returns<A: Actor + ?Sized, T: Scalar>(
    actor: &A,
    env: &GridWorld,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    s0: StateId,
    g: Goal,
    rollouts: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let target = cfg.target_of(cfg.region_of(vt.value(s0, g))).get();
    let horizon = env.max_episode_steps();
    let (mut goal_sum, mut region_sum) = (0.0, 0.0);
    for _ in 0..rollouts {
        let mut s = s0;
        let mut region_done = false;
        let mut disc = 1.0;
        for _ in 0..horizon {
            s = env.next_state(s, actor.choose(s, g, rng));
            if !region_done && in_target(region(vt, cfg, s, g), target, cfg.membership) {
                region_sum += disc;
                region_done = true;
            }
            if s == g.cell() {
                goal_sum += disc;
                break;
            }
            disc *= gamma;
        }
    }
    let r = rollouts.max(1) as f64;
    (goal_sum / r, region_sum / r)
}

/// Learned-minus-true errors of `V` and `V~` under `behavior`, sampled per
/// region separation from the partition induced by `vt`. True values are
/// Monte-Carlo returns of sampled actions over the episode horizon, or the
/// exact truncated-horizon values when `bias.exact` is set.
pub fn estimation_bias_study<T: Scalar>(
    behavior: &TabularPolicy<T>,
    vt: &ValueTable<T>,
    rvt: &RegionValueTable<T>,
    env: &GridWorld,
    cfg: &PartitionConfig,
    bias: &BiasConfig,
    seed: u64,
) -> Result<BiasReport> {
    if rvt.regions() != cfg.regions {
        return Err(DawogError::Shape("region table does not match the partition".into()));
    }
    let probs = PolicyTable::from_tabular(behavior);
    let mdp = GoalMdp::from_grid(env);
    let parent = rng::derive_seed(seed, "bias");
    let kk = cfg.regions;
    let per_sample: Vec<(usize, Option<(f64, f64)>)> = (1..=kk)
        .flat_map(|k| (0..bias.goals_per_separation).map(move |j| (k, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(k, j)| {
            let mut rng = rng::child_stream(parent, ((k - 1) * bias.goals_per_separation + j) as u64);
            let Some((s, g)) = bias_sample(env, vt, cfg, k, &mut rng) else {
                return (k, None);
            };
            let target = cfg.target_of(cfg.region_of(vt.value(s, g)));
            let (v_true, rv_true) = if bias.exact {
                exact_truncated(&mdp, &probs, vt, cfg, s, g, target, bias.gamma, env.max_episode_steps())
            } else {
                monte_carlo_returns(
                    &Sampled(&probs),
                    env,
                    vt,
                    cfg,
                    s,
                    g,
                    bias.mc_rollouts,
                    bias.gamma,
                    &mut rng,
                )
            };
            let v_err = vt.value(s, g).as_f64() - v_true;
            let rv_err = rvt.value(s, g, target).as_f64() - rv_true;
            (k, Some((v_err, rv_err)))
        })
        .collect();
    let mut per_region_gap = Vec::with_capacity(kk);
    let (mut all_v, mut all_rv) = (Vec::new(), Vec::new());
    for k in 1..=kk {
        let mut skipped = 0;
        let (mut v, mut rv) = (Vec::new(), Vec::new());
        for (_, e) in per_sample.iter().filter(|(kk, _)| *kk == k) {
            match e {
                Some((a, b)) => {
                    v.push(*a);
                    rv.push(*b);
                }
                None => skipped += 1,
            }
        }
        per_region_gap.push(SeparationBias {
            separation: k,
            skipped_goals: skipped,
            goal_value: ErrorStats::from_errors(&v),
            region_value: ErrorStats::from_errors(&rv),
        });
        all_v.extend(v);
        all_rv.extend(rv);
    }
    Ok(BiasReport {
        per_region_gap,
        goal_value: ErrorStats::from_errors(&all_v),
        region_value: ErrorStats::from_errors(&all_rv),
    })
}

#[allow(clippy::too_many_arguments)]
fn exact_truncated<T: Scalar>(
    mdp: &GoalMdp,
    probs: &PolicyTable,
    vt: &ValueTable<T>,
    cfg: &PartitionConfig,
    s: StateId,
    g: Goal,
    target: RegionIndex,
    gamma: f64,
    horizon: usize,
) -> (f64, f64) {
    let v = oracle::finite_horizon_goal(mdp, probs, g.idx(), gamma, horizon);
    let in_set = |x: usize| {
        in_target(region(vt, cfg, StateId(x as u32), g), target.get(), cfg.membership)
    };
    let w = oracle::finite_horizon_target(mdp, probs, g.idx(), &in_set, gamma, horizon);
    (v[s.idx()], w[s.idx()])
}

// ---------------------------------------------------------------------------
// Training-based studies

/// Trains one variant and evaluates its greedy policy.
pub fn train_and_evaluate(
    variant: &TrainerVariant,
    ds: &OfflineDataset,
    env: &GridWorld,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(TrainOutcome<f64>, EvalReport)> {
    let out = train::<f64>(variant, ds, env, cfg, seed)?;
    let report = evaluate(&out.policy, env, eval, seed);
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffsetResult {
    pub offset: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// DAWOG with the target region moved `offset` regions above the current
/// one, for every offset and seed.
pub fn target_offset_ablation(
    ds: &OfflineDataset,
    env: &GridWorld,
    base: &TrainConfig,
    offsets: &[usize],
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<Vec<OffsetResult>> {
    if offsets.contains(&0) {
        return Err(DawogError::Config("target offsets must be at least 1".into()));
    }
    let variant = TrainerVariant::preset(VariantKind::Dawog);
    let mut rows = Vec::new();
    for &offset in offsets {
        for &seed in seeds {
            let mut cfg = *base;
            cfg.partition.target_offset = offset;
            let (_, rep) = train_and_evaluate(&variant, ds, env, &cfg, eval, seed)?;
            rows.push(OffsetResult {
                offset,
                seed,
                success_rate: rep.success_rate,
                mean_return: rep.mean_return,
            });
        }
    }
    Ok(rows)
}

pub const DEFAULT_OFFSETS: [usize; 4] = [1, 3, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub regions: usize,
    pub beta: f64,
    pub beta_tilde: f64,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Full factorial over `K` and `(beta, beta~)`, one DAWOG run per cell and
/// seed.
pub fn sensitivity_sweep(
    ds: &OfflineDataset,
    env: &GridWorld,
    base: &TrainConfig,
    regions: &[usize],
    betas: &[(f64, f64)],
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<Vec<SweepCell>> {
    if regions.is_empty() || betas.is_empty() || seeds.is_empty() {
        return Err(DawogError::Config("sweep grids must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &k in regions {
        for &(beta, beta_tilde) in betas {
            let variant = TrainerVariant::preset(VariantKind::Dawog).with_weights(WeightConfig {
                beta,
                beta_tilde,
                ..WeightConfig::default()
            });
            for &seed in seeds {
                let mut cfg = *base;
                cfg.partition.regions = k;
                let (_, rep) = train_and_evaluate(&variant, ds, env, &cfg, eval, seed)?;
                cells.push(SweepCell {
                    regions: k,
                    beta,
                    beta_tilde,
                    seed,
                    success_rate: rep.success_rate,
                    mean_return: rep.mean_return,
                });
            }
        }
    }
    Ok(cells)
}
