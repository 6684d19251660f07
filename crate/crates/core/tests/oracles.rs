//! Learned quantities checked against exact oracles on small known MDPs.

use approx::assert_abs_diff_eq;
use dawog::eval::oracle::{self, GoalMdp, PolicyTable};
use dawog::policy::policy_update;
use dawog::value::{polyak_update, td_update_region_value};
use dawog::{
    Action, Goal, GridWorld, LayoutId, Membership, PartitionConfig, RegionValueTable64, RelabeledSample, State,
    StateId, TabularPolicy64, ValueTable64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAMMA: f64 = 0.99;

fn corridor(n: usize) -> GridWorld {
    GridWorld::from_walls(n, 1, vec![false; n], &[State::new(0, 0)], LayoutId::Custom, 50).unwrap()
}

/// Left or right towards the goal; up/down never help in a corridor.
fn toward(env: &GridWorld) -> impl Fn(usize, usize) -> usize + '_ {
    move |s, g| {
        let (xs, xg) = (env.state(StateId(s as u32)).x, env.state(StateId(g as u32)).x);
        if xg < xs {
            Action::Left.index()
        } else {
            Action::Right.index()
        }
    }
}

#[test]
fn td_on_optimal_corridor_data_matches_bfs_values() {
    let env = corridor(10);
    let choose = toward(&env);
    let mut vt = ValueTable64::new(env.num_states(), 0.5, 0.05);
    let batch = oracle::exhaustive_batch(&env, &choose);
    assert!(oracle::converge_td(&mut vt, &batch, GAMMA, 100, 1e-12, 100_000).is_some());
    for s in env.state_ids() {
        let dist = env.bfs_from(s);
        for g in env.state_ids() {
            let d = dist[g.idx()].unwrap() as i32;
            let want = if d == 0 { 1.0 } else { GAMMA.powi(d - 1) };
            assert_abs_diff_eq!(vt.value(s, Goal(g)), want, epsilon = 1e-9);
        }
    }
}

#[test]
fn td_on_random_policies_matches_exact_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let env = oracle::random_grid(&mut rng, 6, 0.2);
        let mdp = GoalMdp::from_grid(&env);
        let n = mdp.num_states();
        let choices: Vec<usize> = (0..n * n).map(|_| rng.gen_range(0..4)).collect();
        let choose = |s: usize, g: usize| choices[s * n + g];
        let exact = oracle::evaluate_deterministic(&mdp, choose, GAMMA);
        // the deterministic shortcut agrees with the linear solve
        let pol = PolicyTable::deterministic(n, 4, choose);
        let solved = oracle::evaluate_policy(&mdp, &pol, GAMMA).unwrap();
        assert!(exact.sup_distance(&solved) < 1e-10);
        let mut vt = ValueTable64::new(n, 0.5, 0.05);
        let batch = oracle::exhaustive_batch(&env, choose);
        assert!(oracle::converge_td(&mut vt, &batch, GAMMA, 100, 1e-11, 100_000).is_some());
        assert!(oracle::sup_error(&vt, &exact) < 1e-6);
    }
}

/// Chain of `n` cells with the goal at the right end, the goal values of
/// moving right at discount `value_gamma`, and region TD on those values.
struct RegionChain {
    env: GridWorld,
    goal: Goal,
    vt: ValueTable64,
    cfg: PartitionConfig,
}

impl RegionChain {
    fn new(n: usize, value_gamma: f64, cfg: PartitionConfig) -> Self {
        let env = corridor(n);
        let goal = Goal(StateId(n as u32 - 1));
        let mut vt = ValueTable64::new(n, 0.5, 0.05);
        for s in 0..n - 1 {
            vt.set_value(StateId(s as u32), goal, value_gamma.powi((n - 2 - s) as i32));
        }
        vt.sync_target();
        Self { env, goal, vt, cfg }
    }

    fn batch(&self) -> Vec<RelabeledSample> {
        let n = self.env.num_states();
        (0..n - 1)
            .map(|s| {
                let r = u8::from(s + 1 == n - 1);
                RelabeledSample {
                    s: StateId(s as u32),
                    a: Action::Right,
                    s_next: StateId(s as u32 + 1),
                    g: self.goal,
                    r,
                    d: r == 1,
                    traj: 0,
                    t: s as u32,
                    i: n as u32 - 1,
                }
            })
            .collect()
    }

    fn converged_region_values(&self) -> RegionValueTable64 {
        let n = self.env.num_states();
        let mut rvt = RegionValueTable64::new(n, self.cfg.regions, 0.5, 0.05);
        let batch = self.batch();
        let mut last = rvt.values().to_vec();
        for _ in 0..200_000 {
            for _ in 0..100 {
                td_update_region_value(&mut rvt, &batch, &self.vt, &self.cfg, GAMMA);
            }
            polyak_update(&mut rvt);
            let delta = rvt.values().iter().zip(&last).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if delta < 1e-13 {
                return rvt;
            }
            last.copy_from_slice(rvt.values());
        }
        panic!("region TD did not converge");
    }

    /// Exact region values of moving right, one column per region.
    fn exact(&self) -> Vec<Vec<f64>> {
        let n = self.env.num_states();
        let mdp = GoalMdp::from_grid(&self.env);
        let pol = PolicyTable::deterministic(n, 4, |_, _| Action::Right.index());
        let g = self.goal.idx();
        (1..=self.cfg.regions)
            .map(|k| {
                let in_target = |s: usize| {
                    let r = self.cfg.region_of(self.vt.value(StateId(s as u32), self.goal)).get();
                    match self.cfg.membership {
                        Membership::AtLeast => r >= k,
                        Membership::Exact => r == k,
                    }
                };
                oracle::evaluate_target_set(&mdp, &pol, g, &in_target, GAMMA)
            })
            .collect()
    }
}

#[test]
fn region_values_on_a_chain_match_steps_to_next_boundary() {
    let cfg = PartitionConfig::with_regions(5);
    let chain = RegionChain::new(200, GAMMA, cfg);
    let rvt = chain.converged_region_values();
    let exact = chain.exact();
    let n = chain.env.num_states();
    let region = |s: usize| cfg.region_of(chain.vt.value(StateId(s as u32), chain.goal));
    for s in 0..n - 1 {
        let target = cfg.target_of(region(s));
        // steps to the first cell at or above the target region
        let steps = (s + 1..n).find(|&x| region(x).get() >= target.get()).unwrap() - s;
        let want = GAMMA.powi(steps as i32 - 1);
        let learned = rvt.value(StateId(s as u32), chain.goal, target);
        assert_abs_diff_eq!(learned, want, epsilon = 1e-9);
        assert_abs_diff_eq!(exact[target.get() - 1][s], want, epsilon = 1e-12);
    }
}

#[test]
fn skipped_regions_still_count_as_reaching_the_target() {
    // a steep value profile skips bins between neighbouring cells
    let cfg = PartitionConfig::with_regions(10);
    let chain = RegionChain::new(20, 0.7, cfg);
    let n = chain.env.num_states();
    let region = |s: usize| cfg.region_of(chain.vt.value(StateId(s as u32), chain.goal)).get();
    assert!((0..n - 1).any(|s| region(s + 1) > region(s) + 1));
    let rvt = chain.converged_region_values();
    let exact = chain.exact();
    for k in 1..=cfg.regions {
        // each column is non-decreasing towards the goal
        for s in 0..n - 2 {
            assert!(exact[k - 1][s] <= exact[k - 1][s + 1] + 1e-15);
        }
    }
    for s in 0..n - 1 {
        let target = cfg.target_of(cfg.region_of(chain.vt.value(StateId(s as u32), chain.goal)));
        assert_abs_diff_eq!(
            rvt.value(StateId(s as u32), chain.goal, target),
            exact[target.get() - 1][s],
            epsilon = 1e-9
        );
        assert!(exact[target.get() - 1][s] > 0.0);
    }
    // with exact membership a skipped target region is never entered
    let exact_cfg = PartitionConfig {
        membership: Membership::Exact,
        ..cfg
    };
    let strict = RegionChain::new(20, 0.7, exact_cfg).exact();
    let skipped = (1..=cfg.regions).find(|&k| (0..n).all(|s| region(s) != k)).unwrap();
    assert!(strict[skipped - 1].iter().all(|&v| v == 0.0));
}

#[test]
fn weighted_mle_converges_to_weight_ratio() {
    let mut pol = TabularPolicy64::new(2, 0.1);
    let (s, g) = (StateId(0), Goal(StateId(1)));
    let smp = |a| RelabeledSample {
        s,
        a,
        s_next: StateId(1),
        g,
        r: 1,
        d: true,
        traj: 0,
        t: 0,
        i: 1,
    };
    let batch = [smp(Action::Up), smp(Action::Down)];
    for _ in 0..200_000 {
        policy_update(&mut pol, &batch, &[2.0, 1.0], 0.0).unwrap();
    }
    let p = pol.probs(s, g);
    let (up, down) = (p[Action::Up.index()], p[Action::Down.index()]);
    assert!(up + down > 0.9999);
    assert_abs_diff_eq!(up / down, 2.0, epsilon = 1e-3);
}

#[test]
fn optimal_policy_values_follow_bfs_distance_on_umaze() {
    let env = GridWorld::shipped(LayoutId::GridUmaze).unwrap();
    let mdp = GoalMdp::from_grid(&env);
    let n = mdp.num_states();
    let dist = env.all_pairs_distances();
    let choose = |s: usize, g: usize| {
        let d = dist[s][g].unwrap();
        (0..4)
            .find(|&a| {
                let s2 = env.next_state(StateId(s as u32), Action::from_index(a));
                dist[s2.idx()][g].unwrap() + 1 == d
            })
            .unwrap_or(0)
    };
    let v = oracle::evaluate_deterministic(&mdp, choose, GAMMA);
    for s in 0..n {
        for g in 0..n {
            let d = dist[s][g].unwrap() as i32;
            let want = if d == 0 { 1.0 } else { GAMMA.powi(d - 1) };
            assert_abs_diff_eq!(v.get(s, g), want, epsilon = 1e-12);
        }
    }
}
