//! Greedy goal-reaching rollouts.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Goal, GridWorld, StateId};
use crate::policy::Controller;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            gamma: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub start: StateId,
    pub goal: StateId,
    pub steps: u32,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentage in `[0, 100]`.
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
    pub seed_set: Vec<u64>,
    pub per_episode: Vec<EpisodeRecord>,
}

impl EvalReport {
    fn from_episodes(per_episode: Vec<EpisodeRecord>, seed_set: Vec<u64>, gamma: f64) -> Self {
        let episodes = per_episode.len();
        let successes = per_episode.iter().filter(|e| e.success).count();
        let total_return: f64 = per_episode
            .iter()
            .filter(|e| e.success)
            .map(|e| episode_return(e.steps, gamma))
            .sum();
        let denom = episodes.max(1) as f64;
        Self {
            success_rate: 100.0 * successes as f64 / denom,
            mean_return: total_return / denom,
            episodes,
            seed_set,
            per_episode,
        }
    }

    /// Pools several reports into one.
    pub fn merge(reports: &[EvalReport], gamma: f64) -> Self {
        let per_episode = reports.iter().flat_map(|r| r.per_episode.clone()).collect();
        let seed_set = reports.iter().flat_map(|r| r.seed_set.clone()).collect();
        Self::from_episodes(per_episode, seed_set, gamma)
    }
}

/// Discounted return of a successful episode of `steps` transitions; the
/// reward arrives on the last one. A zero-step episode returns 1.
pub fn episode_return(steps: u32, gamma: f64) -> f64 {
    gamma.powi(steps.saturating_sub(1) as i32)
}

/// `(start, goal)` pair of episode `index` under `seed`.
pub fn episode_task(env: &GridWorld, seed: u64, index: u64) -> (StateId, Goal) {
    let mut rng = rng::child_stream(rng::derive_seed(seed, rng::EVAL_STREAM), index);
    let starts = env.start_states();
    let start = starts[rng.gen_range(0..starts.len())];
    let goal = Goal(StateId(rng.gen_range(0..env.num_states()) as u32));
    (start, goal)
}

/// Runs `ctrl` greedily from `start` towards `goal` for at most `horizon`
/// steps. Returns `(steps, success)`.
pub fn rollout<C: Controller + ?Sized>(
    ctrl: &C,
    env: &GridWorld,
    start: StateId,
    goal: Goal,
    horizon: usize,
) -> (u32, bool) {
    if start == goal.cell() {
        return (0, true);
    }
    let mut s = start;
    for t in 0..horizon {
        s = env.next_state(s, ctrl.act(s, goal));
        if s == goal.cell() {
            return (t as u32 + 1, true);
        }
    }
    (horizon as u32, false)
}

/// Success rate and mean discounted return of `ctrl` over `cfg.episodes`
/// episodes with uniformly sampled goals.
pub fn evaluate<C: Controller + Sync + ?Sized>(
    ctrl: &C,
    env: &GridWorld,
    cfg: &EvalConfig,
    seed: u64,
) -> EvalReport {
    let horizon = env.max_episode_steps();
    let per_episode = (0..cfg.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let (start, goal) = episode_task(env, seed, i);
            let (steps, success) = rollout(ctrl, env, start, goal, horizon);
            EpisodeRecord {
                seed,
                start,
                goal: goal.cell(),
                steps,
                success,
            }
        })
        .collect();
    EvalReport::from_episodes(per_episode, vec![seed], cfg.gamma)
}
