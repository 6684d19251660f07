//! Deterministic goal-conditioned grid worlds.
//!
//! States are the free cells of a rectangular grid, goals are cells as well
//! (the achieved-goal map is the identity) and the reward is paid once, on
//! the transition that lands on the goal cell. Moves into walls or off the
//! grid leave the agent where it is.
//!
//! Layout text format: one row per line, `#` wall, `.` free, `S` free start
//! cell. The first line is the top row (`y = height - 1`) so that `Up`
//! increases `y` and the file reads like a picture of the grid.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DawogError, Result};

pub const DEFAULT_MAX_EPISODE_STEPS: usize = 50;
pub const SHIPPED_GRID_SIZE: usize = 16;

const GRID_WALL_LAYOUT: &str = include_str!("../layouts/grid_wall.txt");
const GRID_UMAZE_LAYOUT: &str = include_str!("../layouts/grid_umaze.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub x: u16,
    pub y: u16,
}

impl State {
    pub const fn new(x: u16, y: u16) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Dense index of a free cell inside one [`GridWorld`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(pub u32);

impl StateId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Desired goal. Since the achieved-goal map is the identity this is a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Goal(pub StateId);

impl Goal {
    #[inline]
    pub fn idx(self) -> usize {
        self.0.idx()
    }

    #[inline]
    pub fn cell(self) -> StateId {
        self.0
    }
}

/// Achieved goal of a state.
#[inline]
pub fn achieved_goal(s: StateId) -> Goal {
    Goal(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
}

impl Action {
    pub const COUNT: usize = 4;
    /// Fixed order, also used for greedy tie-breaking.
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Up, Action::Down];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Up => (0, 1),
            Action::Down => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutId {
    GridWall,
    GridUmaze,
    /// Ad-hoc layouts (tests, oracle grids).
    Custom,
}

impl LayoutId {
    pub const SHIPPED: [LayoutId; 2] = [LayoutId::GridWall, LayoutId::GridUmaze];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutId::GridWall => "grid_wall",
            LayoutId::GridUmaze => "grid_umaze",
            LayoutId::Custom => "custom",
        }
    }
}

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutId {
    type Err = DawogError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_wall" | "grid-wall" => Ok(LayoutId::GridWall),
            "grid_umaze" | "grid-umaze" => Ok(LayoutId::GridUmaze),
            "custom" => Ok(LayoutId::Custom),
            other => Err(DawogError::Layout(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub s: StateId,
    pub a: Action,
    /// Sparse reward, 0 or 1.
    pub r: u8,
    pub s_next: StateId,
    pub done: bool,
    pub g: Goal,
}

/// `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    pub actions: Vec<Action>,
    pub goal: Goal,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn reached_goal(&self) -> bool {
        self.states.last().is_some_and(|&s| s == self.goal.cell())
    }
}

/// Result of a shortest-path query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Steps(u32),
    Unreachable,
}

impl Distance {
    pub fn steps(self) -> Option<u32> {
        match self {
            Distance::Steps(d) => Some(d),
            Distance::Unreachable => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridWorld {
    width: usize,
    height: usize,
    /// Row-major over `(x, y)`, `true` where blocked.
    walls: Vec<bool>,
    start_states: Vec<StateId>,
    max_episode_steps: usize,
    layout_id: LayoutId,
    cells: Vec<State>,
    cell_to_id: Vec<Option<StateId>>,
    next: Vec<[StateId; Action::COUNT]>,
}

impl GridWorld {
    /// One of the two shipped 16x16 layouts.
    pub fn shipped(layout: LayoutId) -> Result<Self> {
        let text = match layout {
            LayoutId::GridWall => GRID_WALL_LAYOUT,
            LayoutId::GridUmaze => GRID_UMAZE_LAYOUT,
            LayoutId::Custom => {
                return Err(DawogError::Layout("custom layouts have no shipped file".into()))
            }
        };
        let env = Self::parse(text, layout, DEFAULT_MAX_EPISODE_STEPS)?;
        if env.width != SHIPPED_GRID_SIZE || env.height != SHIPPED_GRID_SIZE {
            return Err(DawogError::Layout(format!(
                "{layout} must be {SHIPPED_GRID_SIZE}x{SHIPPED_GRID_SIZE}, got {}x{}",
                env.width, env.height
            )));
        }
        Ok(env)
    }

    pub fn layout_text(layout: LayoutId) -> Option<&'static str> {
        match layout {
            LayoutId::GridWall => Some(GRID_WALL_LAYOUT),
            LayoutId::GridUmaze => Some(GRID_UMAZE_LAYOUT),
            LayoutId::Custom => None,
        }
    }

    /// Parses the text layout format. Requires a rectangular grid, at least
    /// one start cell, and every free cell reachable from every start.
    pub fn parse(text: &str, layout_id: LayoutId, max_episode_steps: usize) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(DawogError::Layout("empty layout".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut walls = vec![false; width * height];
        let mut starts = Vec::new();
        for (row, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(DawogError::Layout(format!(
                    "row {row} has {} cells, expected {width}",
                    line.chars().count()
                )));
            }
            let y = height - 1 - row;
            for (x, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls[y * width + x] = true,
                    '.' => {}
                    'S' => starts.push(State::new(x as u16, y as u16)),
                    other => {
                        return Err(DawogError::Layout(format!(
                            "unexpected character `{other}` at row {row}, column {x}"
                        )))
                    }
                }
            }
        }
        Self::from_walls(width, height, walls, &starts, layout_id, max_episode_steps)
    }

    /// Builds a grid from an explicit wall mask indexed `y * width + x`.
    pub fn from_walls(
        width: usize,
        height: usize,
        walls: Vec<bool>,
        starts: &[State],
        layout_id: LayoutId,
        max_episode_steps: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 || walls.len() != width * height {
            return Err(DawogError::Layout("wall mask does not match dimensions".into()));
        }
        if width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(DawogError::Layout("grid too large".into()));
        }
        if max_episode_steps == 0 {
            return Err(DawogError::Layout("episode horizon must be positive".into()));
        }
        let mut cells = Vec::new();
        let mut cell_to_id = vec![None; width * height];
        for y in 0..height {
            for x in 0..width {
                if !walls[y * width + x] {
                    cell_to_id[y * width + x] = Some(StateId(cells.len() as u32));
                    cells.push(State::new(x as u16, y as u16));
                }
            }
        }
        if starts.is_empty() {
            return Err(DawogError::Layout("layout has no start cell".into()));
        }
        let mut start_states = Vec::with_capacity(starts.len());
        for st in starts {
            let (x, y) = (st.x as usize, st.y as usize);
            match (x < width && y < height)
                .then(|| cell_to_id[y * width + x])
                .flatten()
            {
                Some(id) => start_states.push(id),
                None => return Err(DawogError::Layout(format!("start {st} is not a free cell"))),
            }
        }
        let next = cells
            .iter()
            .map(|c| {
                Action::ALL.map(|a| {
                    let (dx, dy) = a.delta();
                    let nx = c.x as i32 + dx;
                    let ny = c.y as i32 + dy;
                    let own = cell_to_id[c.y as usize * width + c.x as usize].unwrap();
                    if nx < 0 || ny < 0 || nx >= width as i32 || ny >= height as i32 {
                        own
                    } else {
                        cell_to_id[ny as usize * width + nx as usize].unwrap_or(own)
                    }
                })
            })
            .collect();
        let env = Self {
            width,
            height,
            walls,
            start_states,
            max_episode_steps,
            layout_id,
            cells,
            cell_to_id,
            next,
        };
        for &s in &env.start_states {
            let reach = env.bfs_from(s);
            if let Some(pos) = reach.iter().position(|d| d.is_none()) {
                return Err(DawogError::Layout(format!(
                    "cell {} is not reachable from start {}",
                    env.cells[pos],
                    env.state(s)
                )));
            }
        }
        Ok(env)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn layout_id(&self) -> LayoutId {
        self.layout_id
    }

    pub fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    pub fn with_max_episode_steps(mut self, steps: usize) -> Self {
        self.max_episode_steps = steps.max(1);
        self
    }

    pub fn start_states(&self) -> &[StateId] {
        &self.start_states
    }

    /// Number of free cells.
    pub fn num_states(&self) -> usize {
        self.cells.len()
    }

    pub fn state_ids(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.cells.len() as u32).map(StateId)
    }

    pub fn state(&self, id: StateId) -> State {
        self.cells[id.idx()]
    }

    pub fn id_of(&self, s: State) -> Option<StateId> {
        let (x, y) = (s.x as usize, s.y as usize);
        if x >= self.width || y >= self.height {
            return None;
        }
        self.cell_to_id[y * self.width + x]
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        x >= self.width || y >= self.height || self.walls[y * self.width + x]
    }

    #[inline]
    pub fn next_state(&self, s: StateId, a: Action) -> StateId {
        self.next[s.idx()][a.index()]
    }

    /// One environment step. `done` is set on success only; use
    /// [`GridWorld::step_in_episode`] to also account for the horizon.
    pub fn step(&self, s: StateId, a: Action, g: Goal) -> Transition {
        let s_next = self.next_state(s, a);
        let r = sparse_reward(s_next, g);
        Transition {
            s,
            a,
            r,
            s_next,
            done: r == 1,
            g,
        }
    }

    /// Step taken as the `t`-th (zero-based) action of an episode.
    pub fn step_in_episode(&self, s: StateId, a: Action, g: Goal, t: usize) -> Transition {
        let mut tr = self.step(s, a, g);
        tr.done |= t + 1 >= self.max_episode_steps;
        tr
    }

    /// BFS distances (in actions) from `origin` to every free cell. Grid
    /// moves are reversible, so this is also the distance *to* `origin`.
    pub fn bfs_from(&self, origin: StateId) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.cells.len()];
        let mut queue = VecDeque::new();
        dist[origin.idx()] = Some(0);
        queue.push_back(origin);
        while let Some(s) = queue.pop_front() {
            let d = dist[s.idx()].unwrap();
            for a in Action::ALL {
                let n = self.next_state(s, a);
                if dist[n.idx()].is_none() {
                    dist[n.idx()] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn shortest_path_distance(&self, s: StateId, g: Goal) -> Distance {
        match self.bfs_from(g.cell())[s.idx()] {
            Some(d) => Distance::Steps(d),
            None => Distance::Unreachable,
        }
    }

    /// `dist[g][s]` for all pairs.
    pub fn all_pairs_distances(&self) -> Vec<Vec<Option<u32>>> {
        self.state_ids().map(|g| self.bfs_from(g)).collect()
    }

    /// True if the transition sequence of `traj` follows the dynamics.
    pub fn is_consistent(&self, traj: &Trajectory) -> bool {
        traj.states.len() == traj.actions.len() + 1
            && traj.states.iter().all(|s| s.idx() < self.cells.len())
            && traj
                .actions
                .iter()
                .enumerate()
                .all(|(t, &a)| self.next_state(traj.states[t], a) == traj.states[t + 1])
    }

    /// Renders the layout back into the text format.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let ch = if self.walls[y * self.width + x] {
                    '#'
                } else if self
                    .start_states
                    .iter()
                    .any(|&s| self.state(s) == State::new(x as u16, y as u16))
                {
                    'S'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// 1 when the next state is the goal cell, else 0.
#[inline]
pub fn sparse_reward(s_next: StateId, g: Goal) -> u8 {
    u8::from(achieved_goal(s_next) == g)
}
