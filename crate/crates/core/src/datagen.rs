//! Mixed-quality replay datasets from tabular Q-learning, stored as one
//! JSON-lines file per task plus `manifest.json` (format `radt-ds-1`).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, GridEnv, GridTask, NUM_ACTIONS};
use crate::error::{RadtError, Result};
use crate::seeds::rng_for;

pub const DATASET_FORMAT: &str = "radt-ds-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub episode_id: u64,
    pub states: Vec<(usize, usize)>,
    pub actions: Vec<u8>,
    pub rewards: Vec<u8>,
    pub total_return: u64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self, task: &GridTask) -> std::result::Result<(), String> {
        let n = self.actions.len();
        if self.states.len() != n || self.rewards.len() != n {
            return Err(format!(
                "length mismatch: {} states, {} actions, {} rewards",
                self.states.len(),
                n,
                self.rewards.len()
            ));
        }
        if n == 0 || n > task.episode_len {
            return Err(format!("episode length {n} outside 1..={}", task.episode_len));
        }
        if let Some(a) = self.actions.iter().find(|&&a| a as usize >= NUM_ACTIONS) {
            return Err(format!("action {a} out of range"));
        }
        if let Some(r) = self.rewards.iter().find(|&&r| r > 1) {
            return Err(format!("reward {r} not in {{0,1}}"));
        }
        if let Some(s) = self.states.iter().find(|&&s| !task.contains(s)) {
            return Err(format!("state {s:?} outside grid"));
        }
        let sum: u64 = self.rewards.iter().map(|&r| r as u64).sum();
        if sum != self.total_return {
            return Err(format!("total_return {} != sum of rewards {sum}", self.total_return));
        }
        Ok(())
    }
}

/// Returns-to-go: `R[t] = r[t] + R[t+1]`, `R[T-1] = r[T-1]`.
pub fn compute_rtg(rewards: &[u8]) -> Vec<u64> {
    let mut out = vec![0u64; rewards.len()];
    let mut acc = 0u64;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r as u64;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QLearningConfig {
    pub lr: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the budget over which epsilon decays linearly.
    pub eps_decay_fraction: f64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        QLearningConfig { lr: 0.1, gamma: 0.99, eps_start: 1.0, eps_end: 0.05, eps_decay_fraction: 0.5 }
    }
}

impl QLearningConfig {
    pub fn epsilon(&self, step: usize, budget: usize) -> f64 {
        let horizon = (budget as f64 * self.eps_decay_fraction).max(1.0);
        let frac = (step as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

fn greedy(q: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..q.len()).filter(|&a| q[a] == best).collect();
    ties[rng.gen_range(0..ties.len())]
}

/// Runs epsilon-greedy Q-learning on privileged state (position and key flag)
/// and records every transition as an episode stream totalling `budget` steps.
pub fn collect_task(
    task: &GridTask,
    task_id: usize,
    budget: usize,
    seed: u64,
    cfg: &QLearningConfig,
) -> Result<Vec<EpisodeRecord>> {
    if budget < task.episode_len {
        return Err(RadtError::Config(format!("budget {budget} below episode_len {}", task.episode_len)));
    }
    let mut env = GridEnv::new(task.clone())?;
    let mut rng = rng_for(seed, "collect", task_id as u64);
    let n_states = task.num_cells() * 2;
    let mut q = vec![0.0f64; n_states * NUM_ACTIONS];
    let sidx = |pos, key: bool| (task.cell_index(pos) * 2 + key as usize) * NUM_ACTIONS;
    let mut episodes = Vec::new();
    let mut step = 0usize;
    while step < budget {
        let mut rec = EpisodeRecord {
            task_id,
            episode_id: episodes.len() as u64,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            total_return: 0,
        };
        let mut pos = env.reset();
        let mut has_key = false;
        loop {
            let s = sidx(pos, has_key);
            let a = if rng.gen::<f64>() < cfg.epsilon(step, budget) {
                rng.gen_range(0..NUM_ACTIONS)
            } else {
                greedy(&q[s..s + NUM_ACTIONS], &mut rng)
            };
            let r = env.step(Action::from_index(a).expect("valid action"))?;
            let st = env.state();
            let s2 = sidx(st.pos, st.has_key);
            let next_best = q[s2..s2 + NUM_ACTIONS].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            q[s + a] += cfg.lr * (r.reward as f64 + cfg.gamma * next_best - q[s + a]);
            rec.states.push(pos);
            rec.actions.push(a as u8);
            rec.rewards.push(r.reward);
            rec.total_return += r.reward as u64;
            pos = st.pos;
            has_key = st.has_key;
            step += 1;
            if r.done || step == budget {
                break;
            }
        }
        episodes.push(rec);
    }
    Ok(episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: usize,
    pub task: GridTask,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub algorithm: String,
    pub seed: u64,
    pub params: QLearningConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub transitions_per_task: usize,
    pub generator: GeneratorInfo,
    pub tasks: Vec<TaskEntry>,
}

impl DatasetManifest {
    pub fn task(&self, task_id: usize) -> Option<&GridTask> {
        self.tasks.iter().find(|t| t.task_id == task_id).map(|t| &t.task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<EpisodeRecord>,
}

fn task_file(task_id: usize) -> String {
    format!("task_{task_id:04}.jsonl")
}

pub fn generate_dataset(tasks: &[GridTask], budget: usize, seed: u64, cfg: &QLearningConfig) -> Result<Dataset> {
    let mut episodes = Vec::new();
    let mut entries = Vec::new();
    for (task_id, task) in tasks.iter().enumerate() {
        episodes.extend(collect_task(task, task_id, budget, seed, cfg)?);
        entries.push(TaskEntry { task_id, task: task.clone(), file: task_file(task_id) });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        transitions_per_task: budget,
        generator: GeneratorInfo { algorithm: "tabular_q_learning".into(), seed, params: *cfg },
        tasks: entries,
    };
    Ok(Dataset { manifest, episodes })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    validate(ds)?;
    fs::create_dir_all(dir)?;
    for entry in &ds.manifest.tasks {
        let mut w = BufWriter::new(fs::File::create(dir.join(&entry.file))?);
        for ep in ds.episodes.iter().filter(|e| e.task_id == entry.task_id) {
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(())
}

fn episode_id_of(line: &str) -> Option<u64> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("episode_id")?.as_u64()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(RadtError::Dataset(format!(
            "format version `{}`, expected `{DATASET_FORMAT}`",
            manifest.format
        )));
    }
    let mut episodes = Vec::new();
    for entry in &manifest.tasks {
        let f = BufReader::new(fs::File::open(dir.join(&entry.file))?);
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: EpisodeRecord = serde_json::from_str(&line).map_err(|e| match episode_id_of(&line) {
                Some(episode_id) => RadtError::Episode { episode_id, msg: e.to_string() },
                None => RadtError::Dataset(format!("{}:{}: {e}", entry.file, lineno + 1)),
            })?;
            episodes.push(ep);
        }
    }
    let ds = Dataset { manifest, episodes };
    validate(&ds)?;
    Ok(ds)
}

/// Checks every episode against its task and the per-task transition budget.
pub fn validate(ds: &Dataset) -> Result<()> {
    if ds.manifest.format != DATASET_FORMAT {
        return Err(RadtError::Dataset(format!("format version `{}`", ds.manifest.format)));
    }
    let mut totals = vec![0usize; ds.manifest.tasks.len()];
    let mut last_id: Vec<Option<u64>> = vec![None; ds.manifest.tasks.len()];
    let mut short: Vec<bool> = vec![false; ds.manifest.tasks.len()];
    for ep in &ds.episodes {
        let err = |msg: String| RadtError::Episode { episode_id: ep.episode_id, msg };
        let slot = ds
            .manifest
            .tasks
            .iter()
            .position(|t| t.task_id == ep.task_id)
            .ok_or_else(|| err(format!("task_id {} missing from manifest", ep.task_id)))?;
        let task = &ds.manifest.tasks[slot].task;
        ep.check(task).map_err(err)?;
        if last_id[slot].is_some_and(|p| ep.episode_id <= p) {
            return Err(err("episode ids not increasing within task".into()));
        }
        if short[slot] {
            return Err(err("only the final episode of a task may be truncated".into()));
        }
        short[slot] = ep.len() < task.episode_len;
        last_id[slot] = Some(ep.episode_id);
        totals[slot] += ep.len();
    }
    for (entry, &n) in ds.manifest.tasks.iter().zip(&totals) {
        if n != 0 && n != ds.manifest.transitions_per_task {
            return Err(RadtError::Dataset(format!(
                "task {} holds {n} transitions, manifest says {}",
                entry.task_id, ds.manifest.transitions_per_task
            )));
        }
    }
    Ok(())
}
