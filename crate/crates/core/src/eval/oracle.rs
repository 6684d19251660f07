//! Exact dynamic-programming oracles on small deterministic MDPs.
//!
//! Goal-conditioned values follow the sparse-reward convention of the rest
//! of the crate: reward 1 on the transition that enters the goal, which
//! terminates the episode, and `V(g, g) = 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::RelabeledSample;
use crate::env::{Action, Goal, GridWorld, LayoutId, State};
use crate::error::{DawogError, Result};
use crate::partition::{Membership, PartitionConfig};
use crate::policy::TabularPolicy;
use crate::rng;
use crate::scalar::Scalar;
use crate::value::{td_update_goal_value, Polyak, ValueTable};
use crate::weighting::{exp_clip, WeightConfig};


/// Deterministic MDP over `n` states with a fixed action count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoalMdp {
    n: usize,
    actions: usize,
    next: Vec<u32>,
}

impl GoalMdp {
    /// `next[s * actions + a]` is the successor of `s` under `a`.
    pub fn new(n: usize, actions: usize, next: Vec<u32>) -> Result<Self> {
        if n == 0 || actions == 0 || next.len() != n * actions {
            return Err(DawogError::Shape("transition table does not match n x actions".into()));
        }
        if next.iter().any(|&s| s as usize >= n) {
            return Err(DawogError::Shape("successor out of range".into()));
        }
        Ok(Self { n, actions, next })
    }

    pub fn from_grid(env: &GridWorld) -> Self {
        let next = env
            .state_ids()
            .flat_map(|s| Action::ALL.map(|a| env.next_state(s, a).0))
            .collect();
        Self {
            n: env.num_states(),
            actions: Action::COUNT,
            next,
        }
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    #[inline]
    pub fn next(&self, s: usize, a: usize) -> usize {
        self.next[s * self.actions + a] as usize
    }
}

/// Dense goal-conditioned action probabilities, `[s][g][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    n: usize,
    actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(n: usize, actions: usize) -> Self {
        Self {
            n,
            actions,
            probs: vec![1.0 / actions as f64; n * n * actions],
        }
    }

    pub fn from_fn(n: usize, actions: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        let mut pol = Self::uniform(n, actions);
        for s in 0..n {
            for g in 0..n {
                pol.set(s, g, &f(s, g))?;
            }
        }
        Ok(pol)
    }

    /// One-hot on `choose(s, g)`.
    pub fn deterministic(n: usize, actions: usize, mut choose: impl FnMut(usize, usize) -> usize) -> Self {
        let mut probs = vec![0.0; n * n * actions];
        for s in 0..n {
            for g in 0..n {
                probs[(s * n + g) * actions + choose(s, g)] = 1.0;
            }
        }
        Self { n, actions, probs }
    }

    /// Independent flat-Dirichlet rows.
    pub fn random<R: Rng>(n: usize, actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(n * n * actions);
        for _ in 0..n * n {
            let row: Vec<f64> = (0..actions)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            let total: f64 = row.iter().sum();
            probs.extend(row.iter().map(|x| x / total));
        }
        Self { n, actions, probs }
    }

    /// Softmax probabilities of a tabular policy.
    pub fn from_tabular<T: Scalar>(pol: &TabularPolicy<T>) -> Self {
        let n = pol.num_states();
        Self::from_fn(n, Action::COUNT, |s, g| {
            pol.probs(crate::env::StateId(s as u32), crate::env::Goal(crate::env::StateId(g as u32)))
                .iter()
                .map(|p| p.as_f64())
                .collect()
        })
        .expect("softmax rows are normalized")
    }

    /// The greedy (evaluation-time) behaviour of a tabular policy.
    pub fn greedy_of<T: Scalar>(pol: &TabularPolicy<T>) -> Self {
        let n = pol.num_states();
        Self::deterministic(n, Action::COUNT, |s, g| {
            pol.greedy(crate::env::StateId(s as u32), crate::env::Goal(crate::env::StateId(g as u32)))
                .index()
        })
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    #[inline]
    pub fn probs(&self, s: usize, g: usize) -> &[f64] {
        let o = (s * self.n + g) * self.actions;
        &self.probs[o..o + self.actions]
    }

    pub fn set(&mut self, s: usize, g: usize, p: &[f64]) -> Result<()> {
        if p.len() != self.actions {
            return Err(DawogError::Shape("probability row has the wrong length".into()));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(DawogError::Shape(format!("row ({s}, {g}) is not a distribution")));
        }
        let o = (s * self.n + g) * self.actions;
        self.probs[o..o + self.actions].copy_from_slice(p);
        Ok(())
    }

    fn check(&self, mdp: &GoalMdp) -> Result<()> {
        if self.n != mdp.n || self.actions != mdp.actions {
            return Err(DawogError::Shape("policy does not match the MDP".into()));
        }
        Ok(())
    }
}

/// Exact `V(s, g)`, `[s][g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactValues {
    n: usize,
    values: Vec<f64>,
}

impl ExactValues {
    #[inline]
    pub fn get(&self, s: usize, g: usize) -> f64 {
        self.values[s * self.n + g]
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `Q(s, a, g) = [s' = g] + gamma * [s' != g] * V(s', g)`.
    #[inline]
    pub fn q(&self, mdp: &GoalMdp, s: usize, a: usize, g: usize, gamma: f64) -> f64 {
        let s2 = mdp.next(s, a);
        if s2 == g {
            1.0
        } else {
            gamma * self.get(s2, g)
        }
    }

    #[inline]
    pub fn advantage(&self, mdp: &GoalMdp, s: usize, a: usize, g: usize, gamma: f64) -> f64 {
        self.q(mdp, s, a, g, gamma) - self.get(s, g)
    }

    /// Largest absolute entrywise difference.
    pub fn sup_distance(&self, other: &ExactValues) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Outcome of taking one action.
#[derive(Clone, Copy)]
enum Step {
    /// Episode ends with this reward.
    Stop(f64),
    /// Zero reward, continue from this state.
    Go(usize),
}

/// Solves `W(s) = sum_a pi(a | s) * step(s, a)` exactly, where `Go(s')`
/// contributes `gamma * W(s')`. States mapped to `Some(c)` by `fixed` are
/// pinned to `c`.
fn solve_linear(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    g: usize,
    gamma: f64,
    fixed: impl Fn(usize) -> Option<f64>,
    step: impl Fn(usize, usize) -> Step,
) -> Vec<f64> {
    let n = mdp.n;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..n {
        if let Some(c) = fixed(s) {
            rhs[s] = c;
            continue;
        }
        for (a, &pa) in pol.probs(s, g).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            match step(s, a) {
                Step::Stop(r) => rhs[s] += pa * r,
                Step::Go(s2) => m[(s, s2)] -= gamma * pa,
            }
        }
    }
    // I - gamma P is strictly diagonally dominant for gamma < 1
    m.lu().solve(&rhs).expect("I - gamma P is nonsingular").iter().copied().collect()
}

/// Exact `V^pi(., g)` for one goal.
pub fn evaluate_goal(mdp: &GoalMdp, pol: &PolicyTable, g: usize, gamma: f64) -> Vec<f64> {
    solve_linear(
        mdp,
        pol,
        g,
        gamma,
        |s| (s == g).then_some(1.0),
        |s, a| {
            let s2 = mdp.next(s, a);
            if s2 == g {
                Step::Stop(1.0)
            } else {
                Step::Go(s2)
            }
        },
    )
}

/// `horizon`-step backward recursion of the same equations as
/// [`solve_linear`]; the expected return of rollouts truncated at `horizon`.
fn solve_finite(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    g: usize,
    gamma: f64,
    horizon: usize,
    fixed: impl Fn(usize) -> Option<f64>,
    step: impl Fn(usize, usize) -> Step,
) -> Vec<f64> {
    let n = mdp.n;
    let mut w = vec![0.0; n];
    let mut next = vec![0.0; n];
    for _ in 0..horizon {
        for s in 0..n {
            next[s] = 0.0;
            for (a, &pa) in pol.probs(s, g).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                next[s] += pa * match step(s, a) {
                    Step::Stop(r) => r,
                    Step::Go(s2) => gamma * w[s2],
                };
            }
        }
        std::mem::swap(&mut w, &mut next);
    }
    for (s, x) in w.iter_mut().enumerate() {
        if let Some(c) = fixed(s) {
            *x = c;
        }
    }
    w
}

/// Expected discounted goal return of episodes truncated at `horizon` steps.
pub fn finite_horizon_goal(mdp: &GoalMdp, pol: &PolicyTable, g: usize, gamma: f64, horizon: usize) -> Vec<f64> {
    solve_finite(
        mdp,
        pol,
        g,
        gamma,
        horizon,
        |s| (s == g).then_some(1.0),
        |s, a| {
            let s2 = mdp.next(s, a);
            if s2 == g {
                Step::Stop(1.0)
            } else {
                Step::Go(s2)
            }
        },
    )
}

/// Truncated counterpart of [`evaluate_target_set`].
pub fn finite_horizon_target(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    g: usize,
    in_target: &dyn Fn(usize) -> bool,
    gamma: f64,
    horizon: usize,
) -> Vec<f64> {
    solve_finite(mdp, pol, g, gamma, horizon, |_| None, |s, a| {
        let s2 = mdp.next(s, a);
        if in_target(s2) {
            Step::Stop(1.0)
        } else if s2 == g {
            Step::Stop(0.0)
        } else {
            Step::Go(s2)
        }
    })
}

/// Expected number of steps until the chain induced by `pol` first enters
/// the target set. States that cannot reach it yield infinity.
pub fn mean_first_passage(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    g: usize,
    in_target: &dyn Fn(usize) -> bool,
) -> Vec<f64> {
    let n = mdp.n;
    // restrict to states with a positive-probability path into the target
    let mut reaches = vec![false; n];
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if reaches[s] {
                continue;
            }
            let hit = pol.probs(s, g).iter().enumerate().any(|(a, &pa)| {
                let s2 = mdp.next(s, a);
                pa > 0.0 && (in_target(s2) || reaches[s2])
            });
            if hit {
                reaches[s] = true;
                changed = true;
            }
        }
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..n {
        if !reaches[s] {
            continue;
        }
        rhs[s] = 1.0;
        for (a, &pa) in pol.probs(s, g).iter().enumerate() {
            let s2 = mdp.next(s, a);
            if pa > 0.0 && !in_target(s2) {
                m[(s, s2)] -= pa;
            }
        }
    }
    let t = m.lu().solve(&rhs).expect("absorbing chain is transient");
    (0..n).map(|s| if reaches[s] { t[s] } else { f64::INFINITY }).collect()
}

/// Exact goal-conditioned value table of `pol` for every goal.
pub fn evaluate_policy(mdp: &GoalMdp, pol: &PolicyTable, gamma: f64) -> Result<ExactValues> {
    pol.check(mdp)?;
    let n = mdp.n;
    let mut values = vec![0.0; n * n];
    for g in 0..n {
        let w = evaluate_goal(mdp, pol, g, gamma);
        for s in 0..n {
            values[s * n + g] = w[s];
        }
    }
    Ok(ExactValues { n, values })
}

/// [`evaluate_policy`] on the grid's own dynamics.
pub fn exact_policy_evaluation(env: &GridWorld, pol: &PolicyTable, gamma: f64) -> Result<ExactValues> {
    evaluate_policy(&GoalMdp::from_grid(env), pol, gamma)
}

/// Exact values of a deterministic policy by following its paths; cheaper
/// than iteration on large grids.
pub fn evaluate_deterministic(
    mdp: &GoalMdp,
    choose: impl Fn(usize, usize) -> usize,
    gamma: f64,
) -> ExactValues {
    let n = mdp.n;
    let mut values = vec![0.0; n * n];
    for g in 0..n {
        for s in 0..n {
            values[s * n + g] = if s == g {
                1.0
            } else {
                let mut cur = s;
                let mut hit = None;
                for k in 1..=n {
                    cur = mdp.next(cur, choose(cur, g));
                    if cur == g {
                        hit = Some(k);
                        break;
                    }
                }
                hit.map_or(0.0, |k| gamma.powi(k as i32 - 1))
            };
        }
    }
    ExactValues { n, values }
}

/// Value of reaching a target set under `pol` conditioned on goal `g`:
/// reward 1 on the transition entering the set, which terminates; reaching
/// `g` outside the set also terminates, with reward 0.
pub fn evaluate_target_set(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    g: usize,
    in_target: &dyn Fn(usize) -> bool,
    gamma: f64,
) -> Vec<f64> {
    solve_linear(mdp, pol, g, gamma, |_| None, |s, a| {
        let s2 = mdp.next(s, a);
        if in_target(s2) {
            Step::Stop(1.0)
        } else if s2 == g {
            Step::Stop(0.0)
        } else {
            Step::Go(s2)
        }
    })
}

/// `Q~(s, a, G)` given the target-set values `w` from [`evaluate_target_set`].
pub fn target_q(
    mdp: &GoalMdp,
    s: usize,
    a: usize,
    g: usize,
    in_target: &dyn Fn(usize) -> bool,
    w: &[f64],
    gamma: f64,
) -> f64 {
    let s2 = mdp.next(s, a);
    if in_target(s2) {
        1.0
    } else if s2 == g {
        0.0
    } else {
        gamma * w[s2]
    }
}

/// Exact region values for a value-induced partition: `[s][g][k - 1]` is the
/// value of reaching region `k` (or above, under `AtLeast`) from `s`.
#[derive(Clone, Debug)]
pub struct ExactRegionValues {
    n: usize,
    regions: usize,
    values: Vec<f64>,
}

impl ExactRegionValues {
    #[inline]
    pub fn get(&self, s: usize, g: usize, k: usize) -> f64 {
        self.values[(s * self.n + g) * self.regions + k - 1]
    }
}

fn in_region_target(v: f64, k: usize, cfg: &PartitionConfig) -> bool {
    let r = cfg.region_of(v).get();
    match cfg.membership {
        Membership::AtLeast => r >= k,
        Membership::Exact => r == k,
    }
}

/// Region values of `pol` for the partition induced by `v`.
pub fn exact_region_values(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    v: &ExactValues,
    cfg: &PartitionConfig,
    gamma: f64,
) -> Result<ExactRegionValues> {
    pol.check(mdp)?;
    let (n, kk) = (mdp.n, cfg.regions);
    let mut values = vec![0.0; n * n * kk];
    for g in 0..n {
        for k in 1..=kk {
            let in_target = |s: usize| in_region_target(v.get(s, g), k, cfg);
            let w = evaluate_target_set(mdp, pol, g, &in_target, gamma);
            for s in 0..n {
                values[(s * n + g) * kk + k - 1] = w[s];
            }
        }
    }
    Ok(ExactRegionValues {
        n,
        regions: kk,
        values,
    })
}

/// Exact region advantage `A~(s, a, G(s, g))` with the target region picked
/// from the partition induced by `v`.
pub fn exact_region_advantage(
    mdp: &GoalMdp,
    v: &ExactValues,
    rv: &ExactRegionValues,
    cfg: &PartitionConfig,
    s: usize,
    a: usize,
    g: usize,
    gamma: f64,
) -> f64 {
    let k = cfg.target_of(cfg.region_of(v.get(s, g))).get();
    let s2 = mdp.next(s, a);
    let q = if in_region_target(v.get(s2, g), k, cfg) {
        1.0
    } else if s2 == g {
        0.0
    } else {
        gamma * rv.get(s2, g, k)
    };
    q - rv.get(s, g, k)
}

/// `pi~(a | s, g) = w(s, a, g) * pi_b(a | s, g) / N(s, g)`, with the
/// normalizer summed directly over actions. Rows at `s == g` are copied.
pub fn reweighted_policy(
    mdp: &GoalMdp,
    behavior: &PolicyTable,
    mut weight: impl FnMut(usize, usize, usize) -> f64,
) -> Result<PolicyTable> {
    behavior.check(mdp)?;
    let (n, na) = (mdp.n, mdp.actions);
    let mut out = behavior.clone();
    let mut row = vec![0.0; na];
    for s in 0..n {
        for g in 0..n {
            if s == g {
                continue;
            }
            let p = behavior.probs(s, g);
            for a in 0..na {
                row[a] = weight(s, a, g) * p[a];
            }
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                row.iter_mut().for_each(|x| *x /= z);
                out.set(s, g, &row)?;
            }
        }
    }
    Ok(out)
}

/// Random connected grid with between 3 and `max_side` cells per side.
pub fn random_grid<R: Rng>(rng: &mut R, max_side: usize, wall_density: f64) -> GridWorld {
    assert!(max_side >= 3);
    loop {
        let w = rng.gen_range(3..=max_side);
        let h = rng.gen_range(3..=max_side);
        let walls: Vec<bool> = (0..w * h).map(|_| rng.gen::<f64>() < wall_density).collect();
        let Some(first) = walls.iter().position(|&b| !b) else {
            continue;
        };
        if walls.iter().filter(|&&b| !b).count() < 2 {
            continue;
        }
        let start = State::new((first % w) as u16, (first / w) as u16);
        if let Ok(env) = GridWorld::from_walls(w, h, walls, &[start], LayoutId::Custom, 50) {
            return env;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ImprovementReport {
    pub grids: usize,
    pub checked_entries: usize,
    /// `min(V^pi~ - V^pi_b)` over all grids and entries.
    pub min_gap: f64,
    pub violations: usize,
    pub dual_min_gap: f64,
    pub dual_violations: usize,
}

/// Builds the reweighted policies `pi~ ∝ exp_clip(beta A) pi_b` and
/// `pi~_dual ∝ exp_clip(beta A + beta~ A~) pi_b` for random behaviour
/// policies on random grids and compares their exact values with the
/// behaviour's. A violation is an entry with `V^pi~ < V^pi_b - tol`.
pub fn policy_improvement_suite(
    grids: usize,
    max_side: usize,
    wcfg: &WeightConfig,
    pcfg: &PartitionConfig,
    seed: u64,
    tol: f64,
) -> Result<ImprovementReport> {
    let mut report = ImprovementReport {
        min_gap: f64::INFINITY,
        dual_min_gap: f64::INFINITY,
        ..Default::default()
    };
    let gamma = wcfg.gamma;
    let parent = rng::derive_seed(seed, "improvement_suite");
    for i in 0..grids {
        let mut rng = ChaCha8Rng::seed_from_u64(rng::child_seed(parent, i as u64));
        let env = random_grid(&mut rng, max_side, 0.2);
        let mdp = GoalMdp::from_grid(&env);
        let behavior = PolicyTable::random(mdp.n, mdp.actions, &mut rng);
        let vb = evaluate_policy(&mdp, &behavior, gamma)?;
        let rvb = exact_region_values(&mdp, &behavior, &vb, pcfg, gamma)?;
        let geaw = reweighted_policy(&mdp, &behavior, |s, a, g| {
            exp_clip(wcfg.beta * vb.advantage(&mdp, s, a, g, gamma), wcfg.clip_bound)
        })?;
        let dual = reweighted_policy(&mdp, &behavior, |s, a, g| {
            let adv = vb.advantage(&mdp, s, a, g, gamma);
            let radv = exact_region_advantage(&mdp, &vb, &rvb, pcfg, s, a, g, gamma);
            exp_clip(wcfg.beta * adv + wcfg.beta_tilde * radv, wcfg.clip_bound)
        })?;
        let vg = evaluate_policy(&mdp, &geaw, gamma)?;
        let vd = evaluate_policy(&mdp, &dual, gamma)?;
        for idx in 0..mdp.n * mdp.n {
            let gap = vg.values[idx] - vb.values[idx];
            let dgap = vd.values[idx] - vb.values[idx];
            report.min_gap = report.min_gap.min(gap);
            report.dual_min_gap = report.dual_min_gap.min(dgap);
            report.violations += usize::from(gap < -tol);
            report.dual_violations += usize::from(dgap < -tol);
        }
        report.checked_entries += mdp.n * mdp.n;
        report.grids += 1;
    }
    Ok(report)
}

/// Every `(s, pi(s, g), s', g)` with `s != g` for a deterministic policy on
/// the grid, with reward and termination computed for `g`.
pub fn exhaustive_batch(env: &GridWorld, choose: impl Fn(usize, usize) -> usize) -> Vec<RelabeledSample> {
    let mut batch = Vec::new();
    for s in env.state_ids() {
        for g in env.state_ids() {
            if s == g {
                continue;
            }
            let a = Action::from_index(choose(s.idx(), g.idx()));
            let s_next = env.next_state(s, a);
            let r = u8::from(s_next == g);
            batch.push(RelabeledSample {
                s,
                a,
                s_next,
                g: Goal(g),
                r,
                d: r == 1,
                traj: 0,
                t: 0,
                i: 1,
            });
        }
    }
    batch
}

/// Runs full-batch TD with Polyak target updates every `inner` steps until
/// online and target tables agree within `tol`. Returns the number of
/// target updates, or `None` if `max_outer` is exhausted.
pub fn converge_td<T: Scalar>(
    vt: &mut ValueTable<T>,
    batch: &[RelabeledSample],
    gamma: f64,
    inner: usize,
    tol: f64,
    max_outer: usize,
) -> Option<usize> {
    for outer in 1..=max_outer {
        for _ in 0..inner {
            td_update_goal_value(vt, batch, gamma);
        }
        vt.polyak_update();
        let gap = vt
            .values()
            .iter()
            .zip(vt.target_values())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max);
        if gap < tol {
            return Some(outer);
        }
    }
    None
}

/// Sup-norm distance between a learned table and exact values.
pub fn sup_error<T: Scalar>(vt: &ValueTable<T>, exact: &ExactValues) -> f64 {
    vt.values()
        .iter()
        .zip(exact.as_slice())
        .map(|(a, b)| (a.as_f64() - b).abs())
        .fold(0.0, f64::max)
}

/// The motivating example: from `s1`, action `a1` follows a long path that
/// always reaches the goal, `a2` leads through `m1` to a branching state
/// `s2` where the behaviour policy reaches the goal half of the time, and
/// `a3` falls into a sink. The target set `G` of `s1` is entered on the
/// eighth transition along the `a1` path and on the fourth along both `a2`
/// branches, including the failing one.
pub mod toy {
    use super::*;

    pub const S1: usize = 0;
    /// `p1..=p10` are `1..=10`.
    pub const P1: usize = 1;
    pub const M1: usize = 11;
    pub const S2: usize = 12;
    /// `q1..=q3` are `13..=15`.
    pub const Q1: usize = 13;
    /// `c1..=c3` are `16..=18`.
    pub const C1: usize = 16;
    pub const SINK: usize = 19;
    pub const GOAL: usize = 20;
    pub const NUM_STATES: usize = 21;

    pub const A1: usize = 0;
    pub const A2: usize = 1;
    pub const A3: usize = 2;

    pub fn mdp() -> GoalMdp {
        let mut next = vec![0u32; NUM_STATES * 3];
        let mut set = |s: usize, succ: [usize; 3]| {
            for a in 0..3 {
                next[s * 3 + a] = succ[a] as u32;
            }
        };
        set(S1, [P1, M1, SINK]);
        for i in 0..10 {
            let s2 = if i == 9 { GOAL } else { P1 + i + 1 };
            set(P1 + i, [s2; 3]);
        }
        set(M1, [S2; 3]);
        set(S2, [SINK, Q1, C1]);
        set(Q1, [Q1 + 1; 3]);
        set(Q1 + 1, [Q1 + 2; 3]);
        set(Q1 + 2, [GOAL; 3]);
        set(C1, [C1 + 1; 3]);
        set(C1 + 1, [C1 + 2; 3]);
        set(C1 + 2, [SINK; 3]);
        set(SINK, [SINK; 3]);
        set(GOAL, [GOAL; 3]);
        GoalMdp::new(NUM_STATES, 3, next).expect("toy transition table is well formed")
    }

    /// Four trajectories from `s1`: one per `a1` and `a3`, two through
    /// `a2` splitting evenly at `s2`.
    pub fn behavior() -> PolicyTable {
        let mut pol = PolicyTable::deterministic(NUM_STATES, 3, |_, _| A1);
        for g in 0..NUM_STATES {
            pol.set(S1, g, &[0.25, 0.5, 0.25]).unwrap();
            pol.set(S2, g, &[0.0, 0.5, 0.5]).unwrap();
        }
        pol
    }

    /// `{p8, p9, p10, q2, q3, c2, c3, goal}`.
    pub fn target_set(s: usize) -> bool {
        (P1 + 7..=P1 + 9).contains(&s)
            || s == Q1 + 1
            || s == Q1 + 2
            || s == C1 + 1
            || s == C1 + 2
            || s == GOAL
    }
}

/// States entered first in the target set from `s`, over all paths with
/// positive probability under `pol`.
pub fn entry_states(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    s: usize,
    g: usize,
    in_target: &dyn Fn(usize) -> bool,
) -> Vec<usize> {
    let mut seen = vec![false; mdp.n];
    let mut entries = vec![false; mdp.n];
    let mut stack = vec![s];
    seen[s] = true;
    while let Some(u) = stack.pop() {
        for a in 0..mdp.actions {
            // the first step from `s` considers every action
            if u != s && pol.probs(u, g)[a] == 0.0 {
                continue;
            }
            let v = mdp.next(u, a);
            if in_target(v) {
                entries[v] = true;
            } else if v != g && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    (0..mdp.n).filter(|&v| entries[v]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityCheck {
    /// Goal values over the entry states are within tolerance of each other.
    pub close: bool,
    pub entry_value_spread: f64,
    /// Action pairs ordered by `A` whose `A~` order agrees.
    pub agreeing_pairs: usize,
    pub disagreeing_pairs: usize,
}

/// Checks at `(s, g)` whether `A(a') >= A(a'')` implies
/// `A~(a') >= A~(a'')` for the target set, and whether the goal values at
/// the target-set entry states are close enough for that implication to be
/// expected.
pub fn monotonicity_check(
    mdp: &GoalMdp,
    pol: &PolicyTable,
    s: usize,
    g: usize,
    in_target: &dyn Fn(usize) -> bool,
    gamma: f64,
    closeness: f64,
) -> Result<MonotonicityCheck> {
    pol.check(mdp)?;
    let v = evaluate_goal(mdp, pol, g, gamma);
    let w = evaluate_target_set(mdp, pol, g, in_target, gamma);
    let entries = entry_states(mdp, pol, s, g, in_target);
    let (lo, hi) = entries
        .iter()
        .map(|&e| v[e])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let spread = if entries.is_empty() { 0.0 } else { hi - lo };
    let q = |a: usize| {
        let s2 = mdp.next(s, a);
        if s2 == g {
            1.0
        } else {
            gamma * v[s2]
        }
    };
    let qt = |a: usize| target_q(mdp, s, a, g, in_target, &w, gamma);
    let (mut agree, mut disagree) = (0, 0);
    for a1 in 0..mdp.actions {
        for a2 in 0..mdp.actions {
            if a1 == a2 || q(a1) < q(a2) {
                continue;
            }
            // advantages share the baseline, so Q order is A order
            if qt(a1) >= qt(a2) - 1e-12 {
                agree += 1;
            } else {
                disagree += 1;
            }
        }
    }
    Ok(MonotonicityCheck {
        close: spread <= closeness,
        entry_value_spread: spread,
        agreeing_pairs: agree,
        disagreeing_pairs: disagree,
    })
}
