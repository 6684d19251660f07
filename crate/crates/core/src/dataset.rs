//! Offline behaviour dataset and hindsight-relabelled minibatches.
//!
//! The dataset is the full replay buffer of a tabular goal-conditioned
//! Q-learning agent trained with an epsilon-greedy schedule, so it mixes
//! early exploratory trajectories with later competent ones. Relabelling is
//! lazy: a minibatch draw picks a transition uniformly over the whole buffer
//! and then a goal achieved at a uniformly chosen strictly later step of the
//! same trajectory.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sparse_reward, Action, Goal, GridWorld, LayoutId, State, StateId, Trajectory};
use crate::error::{DawogError, Result};
use crate::rng;

pub const TABULAR_Q_BEHAVIOR: &str = "tabular_q_learning";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub trajectories: usize,
    pub horizon: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub q_learning_rate: f64,
    pub gamma: f64,
    /// Update the Q-table for every goal on each observed transition, not
    /// only for the episode goal. Rewards are known for all goals since the
    /// achieved goal is the state itself.
    pub all_goal_updates: bool,
    /// Initial Q-value of every entry. Values above the largest achievable
    /// return make untried actions look attractive.
    pub q_init: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            trajectories: 4000,
            horizon: 50,
            epsilon_start: 1.0,
            epsilon_end: 0.6,
            epsilon_decay_fraction: 0.5,
            q_learning_rate: 0.5,
            gamma: 0.99,
            all_goal_updates: true,
            q_init: 1.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DawogError::Config(m.to_string()));
        if self.trajectories == 0 {
            return bad("trajectory count must be positive");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon decay fraction must lie in [0, 1]");
        }
        if !(self.q_learning_rate > 0.0 && self.q_learning_rate <= 1.0) {
            return bad("q learning rate must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !self.q_init.is_finite() {
            return bad("initial Q-value must be finite");
        }
        Ok(())
    }

    fn epsilon(&self, episode: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.trajectories as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Clone, Debug)]
pub struct OfflineDataset {
    layout_id: LayoutId,
    trajectories: Vec<Trajectory>,
    behavior_policy_id: String,
    rng_seed: u64,
    /// `offsets[k]` is the number of transitions in trajectories `0..k`.
    offsets: Vec<usize>,
}

/// Hindsight-relabelled transition. `g` is the state reached at step `i` of
/// trajectory `traj`, with `i > t`; `r` and `d` are recomputed for `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelabeledSample {
    pub s: StateId,
    pub a: Action,
    pub s_next: StateId,
    pub g: Goal,
    pub r: u8,
    /// `s_next` achieves `g`.
    pub d: bool,
    pub traj: u32,
    pub t: u32,
    pub i: u32,
}

impl OfflineDataset {
    pub fn new(
        layout_id: LayoutId,
        trajectories: Vec<Trajectory>,
        behavior_policy_id: impl Into<String>,
        rng_seed: u64,
    ) -> Self {
        let mut offsets = Vec::with_capacity(trajectories.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for tr in &trajectories {
            acc += tr.len();
            offsets.push(acc);
        }
        Self {
            layout_id,
            trajectories,
            behavior_policy_id: behavior_policy_id.into(),
            rng_seed,
            offsets,
        }
    }

    pub fn layout_id(&self) -> LayoutId {
        self.layout_id
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn behavior_policy_id(&self) -> &str {
        &self.behavior_policy_id
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_transitions(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn success_fraction(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let ok = self.trajectories.iter().filter(|t| t.reached_goal()).count();
        ok as f64 / self.trajectories.len() as f64
    }

    /// Checks every trajectory against the environment dynamics.
    pub fn validate(&self, env: &GridWorld) -> Result<()> {
        if env.layout_id() != self.layout_id {
            return Err(DawogError::Dataset(format!(
                "dataset layout {} does not match environment {}",
                self.layout_id,
                env.layout_id()
            )));
        }
        for (k, tr) in self.trajectories.iter().enumerate() {
            if !env.is_consistent(tr) {
                return Err(DawogError::Dataset(format!("trajectory {k} violates the dynamics")));
            }
            if tr.len() > env.max_episode_steps() {
                return Err(DawogError::Dataset(format!("trajectory {k} exceeds the horizon")));
            }
            if tr.goal.idx() >= env.num_states() {
                return Err(DawogError::Dataset(format!("trajectory {k} has an invalid goal")));
            }
        }
        Ok(())
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        // Index of the last offset <= flat among trajectories with transitions.
        let k = self.offsets.partition_point(|&o| o <= flat) - 1;
        (k, flat - self.offsets[k])
    }

    /// Draws one relabelled sample with the "future" strategy.
    pub fn sample_relabeled(&self, rng: &mut ChaCha8Rng) -> RelabeledSample {
        let flat = rng.gen_range(0..self.num_transitions());
        let (k, t) = self.locate(flat);
        let tr = &self.trajectories[k];
        let i = rng.gen_range(t + 1..=tr.len());
        let g = Goal(tr.states[i]);
        let s_next = tr.states[t + 1];
        let r = sparse_reward(s_next, g);
        RelabeledSample {
            s: tr.states[t],
            a: tr.actions[t],
            s_next,
            g,
            r,
            d: r == 1,
            traj: k as u32,
            t: t as u32,
            i: i as u32,
        }
    }

    pub fn sample_relabeled_batch(
        &self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<RelabeledSample>> {
        let mut out = Vec::with_capacity(batch_size);
        self.fill_relabeled_batch(&mut out, batch_size, rng)?;
        Ok(out)
    }

    /// Like [`Self::sample_relabeled_batch`] but reuses `out`.
    pub fn fill_relabeled_batch(
        &self,
        out: &mut Vec<RelabeledSample>,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if batch_size == 0 {
            return Err(DawogError::Config("batch size must be positive".into()));
        }
        if self.num_transitions() == 0 {
            return Err(DawogError::Dataset("dataset has no transitions".into()));
        }
        out.clear();
        out.extend((0..batch_size).map(|_| self.sample_relabeled(rng)));
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, env: &GridWorld, mut w: W) -> Result<()> {
        for tr in &self.trajectories {
            let line = TrajectoryRecord {
                states: tr.states.iter().map(|&s| cell(env.state(s))).collect(),
                actions: tr.actions.clone(),
                goal: cell(env.state(tr.goal.cell())),
                seed: self.rng_seed,
                layout_id: self.layout_id,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the JSON Lines format and validates it against `env`.
    pub fn read_jsonl<R: BufRead>(env: &GridWorld, r: R) -> Result<Self> {
        let mut trajectories = Vec::new();
        let mut seed = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line)?;
            if rec.layout_id != env.layout_id() {
                return Err(DawogError::Dataset(format!(
                    "line {}: layout {} does not match {}",
                    lineno + 1,
                    rec.layout_id,
                    env.layout_id()
                )));
            }
            if *seed.get_or_insert(rec.seed) != rec.seed {
                return Err(DawogError::Dataset(format!("line {}: mixed seeds", lineno + 1)));
            }
            let lookup = |c: [u16; 2]| {
                env.id_of(State::new(c[0], c[1])).ok_or_else(|| {
                    DawogError::Dataset(format!("line {}: cell {c:?} is not free", lineno + 1))
                })
            };
            let states = rec.states.iter().map(|&c| lookup(c)).collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory {
                states,
                actions: rec.actions,
                goal: Goal(lookup(rec.goal)?),
            });
        }
        let ds = Self::new(env.layout_id(), trajectories, TABULAR_Q_BEHAVIOR, seed.unwrap_or(0));
        ds.validate(env)?;
        Ok(ds)
    }
}

fn cell(s: State) -> [u16; 2] {
    [s.x, s.y]
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    states: Vec<[u16; 2]>,
    actions: Vec<Action>,
    goal: [u16; 2],
    seed: u64,
    layout_id: LayoutId,
}

/// Runs epsilon-greedy tabular Q-learning on `env` and returns its replay
/// buffer. Episodes start at a uniformly chosen start cell with a goal drawn
/// uniformly from the other free cells.
pub fn generate_behavior_dataset(
    env: &GridWorld,
    config: &GenerationConfig,
    seed: u64,
) -> Result<OfflineDataset> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::DATA_STREAM);
    let n = env.num_states();
    if n < 2 {
        return Err(DawogError::Config("environment needs at least two free cells".into()));
    }
    // q[(g * n + s) * 4 + a]
    let mut q = vec![config.q_init; n * n * Action::COUNT];
    let horizon = config.horizon.min(env.max_episode_steps());
    let (alpha, gamma) = (config.q_learning_rate, config.gamma);
    let mut trajectories = Vec::with_capacity(config.trajectories);

    for episode in 0..config.trajectories {
        let eps = config.epsilon(episode);
        let start = env.start_states()[rng.gen_range(0..env.start_states().len())];
        let goal = loop {
            let g = StateId(rng.gen_range(0..n as u32));
            if g != start {
                break Goal(g);
            }
        };
        let mut states = vec![start];
        let mut actions = Vec::new();
        let mut s = start;
        for t in 0..horizon {
            let a = if rng.gen::<f64>() < eps {
                Action::from_index(rng.gen_range(0..Action::COUNT))
            } else {
                greedy_with_random_ties(&q[(goal.idx() * n + s.idx()) * 4..][..4], &mut rng)
            };
            let tr = env.step(s, a, goal);
            let mut update = |g: usize| {
                let r = f64::from(sparse_reward(tr.s_next, Goal(StateId(g as u32))));
                let bootstrap = if r > 0.0 {
                    0.0
                } else {
                    let row = &q[(g * n + tr.s_next.idx()) * 4..][..4];
                    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                let cell = &mut q[(g * n + s.idx()) * 4 + a.index()];
                *cell += alpha * (r + gamma * bootstrap - *cell);
            };
            if config.all_goal_updates {
                (0..n).for_each(&mut update);
            } else {
                update(goal.idx());
            }
            actions.push(a);
            states.push(tr.s_next);
            s = tr.s_next;
            if tr.done || t + 1 >= horizon {
                break;
            }
        }
        trajectories.push(Trajectory {
            states,
            actions,
            goal,
        });
    }
    Ok(OfflineDataset::new(
        env.layout_id(),
        trajectories,
        TABULAR_Q_BEHAVIOR,
        seed,
    ))
}

fn greedy_with_random_ties(row: &[f64], rng: &mut ChaCha8Rng) -> Action {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..row.len()).filter(|&a| row[a] == best).collect();
    Action::from_index(ties[rng.gen_range(0..ties.len())])
}
