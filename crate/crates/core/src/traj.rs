use serde::{Deserialize, Serialize};

use crate::datagen::{compute_rtg, EpisodeRecord};
use crate::envs::GridTask;

/// Contiguous steps, one entry per timestep. States are flat cell indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<u32>,
    pub actions: Vec<u8>,
    pub rewards: Vec<u8>,
    pub rtg: Vec<f32>,
    /// Absolute position of each step in its sequence.
    pub timesteps: Vec<u32>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_aligned(&self) -> bool {
        let n = self.states.len();
        self.actions.len() == n && self.rewards.len() == n && self.rtg.len() == n && self.timesteps.len() == n
    }

    pub fn slice(&self, start: usize, end: usize) -> Segment {
        Segment {
            states: self.states[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            rewards: self.rewards[start..end].to_vec(),
            rtg: self.rtg[start..end].to_vec(),
            timesteps: self.timesteps[start..end].to_vec(),
        }
    }

    pub fn push(&mut self, state: u32, action: u8, reward: u8, rtg: f32, timestep: u32) {
        self.states.push(state);
        self.actions.push(action);
        self.rewards.push(reward);
        self.rtg.push(rtg);
        self.timesteps.push(timestep);
    }

    pub fn append(&mut self, other: &Segment) {
        self.states.extend_from_slice(&other.states);
        self.actions.extend_from_slice(&other.actions);
        self.rewards.extend_from_slice(&other.rewards);
        self.rtg.extend_from_slice(&other.rtg);
        self.timesteps.extend_from_slice(&other.timesteps);
    }
}

/// A full episode with precomputed returns-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: usize,
    pub episode_id: u64,
    pub steps: Segment,
    pub total_return: u64,
}

impl Episode {
    pub fn from_record(rec: &EpisodeRecord, task: &GridTask) -> Self {
        let rtg = compute_rtg(&rec.rewards).into_iter().map(|v| v as f32).collect();
        Episode {
            task_id: rec.task_id,
            episode_id: rec.episode_id,
            steps: Segment {
                states: rec.states.iter().map(|&c| task.cell_index(c) as u32).collect(),
                actions: rec.actions.clone(),
                rewards: rec.rewards.clone(),
                rtg,
                timesteps: (0..rec.len() as u32).collect(),
            },
            total_return: rec.total_return,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
