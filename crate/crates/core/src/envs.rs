//! Dark-Room and Dark Key-Door grid worlds.
//!
//! Coordinates are `(x, y)` with the origin in the top-left corner and `y`
//! growing downward. The agent observes only its position.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RadtError, Result};

pub type Cell = (usize, usize);

pub const NUM_ACTIONS: usize = 5;
pub const START: Cell = (0, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DarkRoom,
    DarkKeyDoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One task: grid geometry plus the hidden goal (the door for key-door).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridTask {
    pub kind: TaskKind,
    pub width: usize,
    pub height: usize,
    pub goal: Cell,
    pub key: Option<Cell>,
    pub episode_len: usize,
}

impl GridTask {
    pub fn dark_room(width: usize, height: usize, goal: Cell) -> Self {
        GridTask { kind: TaskKind::DarkRoom, width, height, goal, key: None, episode_len: width * height }
    }

    pub fn key_door(width: usize, height: usize, key: Cell, door: Cell) -> Self {
        GridTask { kind: TaskKind::DarkKeyDoor, width, height, goal: door, key: Some(key), episode_len: width * height }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        (idx % self.width, idx / self.width)
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.0 < self.width && c.1 < self.height
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RadtError::InvalidTask(m));
        if self.width == 0 || self.height == 0 || self.episode_len == 0 {
            return bad("grid dimensions and episode_len must be positive".into());
        }
        if !self.contains(self.goal) {
            return bad(format!("goal {:?} outside {}x{} grid", self.goal, self.width, self.height));
        }
        match (self.kind, self.key) {
            (TaskKind::DarkRoom, Some(_)) => bad("dark_room task must not have a key".into()),
            (TaskKind::DarkKeyDoor, None) => bad("dark_key_door task requires a key".into()),
            (TaskKind::DarkKeyDoor, Some(k)) if !self.contains(k) => bad(format!("key {k:?} outside grid")),
            (TaskKind::DarkKeyDoor, Some(k)) if k == self.goal => bad("key must differ from goal".into()),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("task serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: GridTask = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub pos: Cell,
    pub has_key: bool,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepResult {
    pub obs: Cell,
    pub reward: u8,
    pub done: bool,
}

pub fn apply_action(task: &GridTask, pos: Cell, a: Action) -> Cell {
    let (x, y) = pos;
    match a {
        Action::Up => (x, y.saturating_sub(1)),
        Action::Down => (x, (y + 1).min(task.height - 1)),
        Action::Left => (x.saturating_sub(1), y),
        Action::Right => ((x + 1).min(task.width - 1), y),
        Action::Stay => (x, y),
    }
}

/// Reward of landing on `pos`, and the resulting key flag.
pub fn reward_for(task: &GridTask, pos: Cell, has_key: bool) -> (u8, bool) {
    match task.kind {
        TaskKind::DarkRoom => ((pos == task.goal) as u8, false),
        TaskKind::DarkKeyDoor => {
            if (!has_key && Some(pos) == task.key) || (has_key && pos == task.goal) {
                (1, true)
            } else {
                (0, has_key)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridEnv {
    task: GridTask,
    state: EnvState,
}

impl GridEnv {
    pub fn new(task: GridTask) -> Result<Self> {
        task.validate()?;
        Ok(GridEnv { task, state: EnvState { pos: START, has_key: false, t: 0 } })
    }

    pub fn task(&self) -> &GridTask {
        &self.task
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn reset(&mut self) -> Cell {
        self.state = EnvState { pos: START, has_key: false, t: 0 };
        START
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.state.t >= self.task.episode_len {
            return Err(RadtError::EpisodeExhausted);
        }
        let pos = apply_action(&self.task, self.state.pos, action);
        let (reward, has_key) = reward_for(&self.task, pos, self.state.has_key);
        self.state = EnvState { pos, has_key, t: self.state.t + 1 };
        Ok(StepResult { obs: pos, reward, done: self.state.t == self.task.episode_len })
    }
}

/// Shortest path length on the open grid (breadth-first search).
pub fn bfs_distance(task: &GridTask, from: Cell, to: Cell) -> Option<usize> {
    if !task.contains(from) || !task.contains(to) {
        return None;
    }
    let mut dist = vec![usize::MAX; task.num_cells()];
    let mut queue = VecDeque::from([from]);
    dist[task.cell_index(from)] = 0;
    while let Some(c) = queue.pop_front() {
        let dc = dist[task.cell_index(c)];
        if c == to {
            return Some(dc);
        }
        for a in Action::ALL {
            let n = apply_action(task, c, a);
            let ni = task.cell_index(n);
            if dist[ni] == usize::MAX {
                dist[ni] = dc + 1;
                queue.push_back(n);
            }
        }
    }
    None
}

/// Best achievable episode return from the start cell.
///
/// Rewards are granted on arrival, so reaching the goal after `d` moves
/// yields `episode_len - d + 1` goal steps. A goal at the start cell is
/// first rewarded after one step of staying.
pub fn optimal_return(task: &GridTask) -> Result<u64> {
    task.validate()?;
    let t = task.episode_len;
    let unreachable = || RadtError::InvalidTask(format!("goal unreachable in {task:?}"));
    match task.kind {
        TaskKind::DarkRoom => {
            let d = bfs_distance(task, START, task.goal).ok_or_else(unreachable)?.max(1);
            Ok((t + 1).saturating_sub(d) as u64)
        }
        TaskKind::DarkKeyDoor => {
            let key = task.key.expect("validated");
            let d1 = bfs_distance(task, START, key).ok_or_else(unreachable)?.max(1);
            let d2 = bfs_distance(task, key, task.goal).ok_or_else(unreachable)?;
            if d1 > t {
                return Ok(0);
            }
            Ok(1 + (t + 1).saturating_sub(d1 + d2) as u64)
        }
    }
}

/// Random disjoint train/eval task sets.
///
/// Dark-Room goals avoid the start cell unless every cell is needed to
/// satisfy the request. Key-Door keys and doors never sit on the start cell.
pub fn task_split(
    kind: TaskKind,
    width: usize,
    height: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<GridTask>, Vec<GridTask>)> {
    let cells: Vec<Cell> = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).collect();
    let requested = n_train + n_eval;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<GridTask> = match kind {
        TaskKind::DarkRoom => {
            let non_start: Vec<Cell> = cells.iter().copied().filter(|&c| c != START).collect();
            let goals = if requested <= non_start.len() { non_start } else { cells };
            goals.into_iter().map(|g| GridTask::dark_room(width, height, g)).collect()
        }
        TaskKind::DarkKeyDoor => {
            let free: Vec<Cell> = cells.iter().copied().filter(|&c| c != START).collect();
            free.iter()
                .flat_map(|&k| free.iter().filter(move |&&d| d != k).map(move |&d| (k, d)))
                .map(|(k, d)| GridTask::key_door(width, height, k, d))
                .collect()
        }
    };
    if requested > pool.len() {
        return Err(RadtError::InsufficientTasks { requested, available: pool.len() });
    }
    let (chosen, _) = pool.partial_shuffle(&mut rng, requested);
    let eval = chosen[n_train..].to_vec();
    let train = chosen[..n_train].to_vec();
    Ok((train, eval))
}
