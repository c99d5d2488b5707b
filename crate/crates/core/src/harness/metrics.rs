//! Per-trial learning curves and stratified bootstrap intervals.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RadtError, Result};
use crate::harness::eval::EvalOutcome;
use crate::seeds::rng_for;

pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub task: usize,
    pub seed: u64,
    /// 1-based.
    pub trial: usize,
    #[serde(rename = "return")]
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialCurve {
    pub method: String,
    pub trials: usize,
    pub records: Vec<TrialRecord>,
}

impl TrialCurve {
    pub fn new(method: &str, trials: usize) -> Self {
        TrialCurve { method: method.to_string(), trials, records: Vec::new() }
    }

    pub fn add(&mut self, seed: u64, outcome: &EvalOutcome) {
        for (task, rets) in outcome.task_ids.iter().zip(outcome.returns()) {
            for (i, ret) in rets.into_iter().enumerate() {
                self.records.push(TrialRecord { method: self.method.clone(), task: *task, seed, trial: i + 1, ret });
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.trial == 0 || r.trial > self.trials {
                return Err(RadtError::Invariant(format!("trial {} outside 1..={}", r.trial, self.trials)));
            }
            if r.ret.is_nan() || r.ret < 0.0 {
                return Err(RadtError::Invariant(format!("negative return {} in trial {}", r.ret, r.trial)));
            }
        }
        Ok(())
    }

    /// Scores of one trial grouped `[seed][task]`, both in ascending order.
    pub fn scores(&self, trial: usize) -> Vec<Vec<f64>> {
        let mut by_seed: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.trial == trial) {
            by_seed.entry(r.seed).or_default().insert(r.task, r.ret);
        }
        by_seed.into_values().map(|m| m.into_values().collect()).collect()
    }

    /// Mean return over tasks and seeds, per trial.
    pub fn means(&self) -> Vec<f64> {
        (1..=self.trials)
            .map(|t| {
                let s: Vec<f64> = self.scores(t).into_iter().flatten().collect();
                if s.is_empty() {
                    f64::NAN
                } else {
                    s.iter().sum::<f64>() / s.len() as f64
                }
            })
            .collect()
    }

    pub fn summarize(&self, resamples: usize, level: f64, seed: u64) -> Result<Vec<TrialSummary>> {
        (1..=self.trials)
            .map(|t| {
                let (mean, lo, hi) = bootstrap_ci(&self.scores(t), resamples, level, seed)?;
                Ok(TrialSummary { trial: t, mean, lo, hi })
            })
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Mean over all scores with a percentile interval. Each resample draws
/// tasks with replacement independently within every seed.
pub fn bootstrap_ci(scores: &[Vec<f64>], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64, f64)> {
    if scores.is_empty() || scores.iter().any(|s| s.is_empty()) {
        return Err(RadtError::Empty("bootstrap needs at least one task per seed".into()));
    }
    if resamples == 0 || !(0.0..1.0).contains(&level) {
        return Err(RadtError::Config("bootstrap needs resamples > 0 and level in [0, 1)".into()));
    }
    let n: usize = scores.iter().map(|s| s.len()).sum();
    let mean = scores.iter().flatten().sum::<f64>() / n as f64;
    let mut rng = rng_for(seed, "bootstrap", 0);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut total = 0.0;
        for s in scores {
            for _ in 0..s.len() {
                total += s[rng.gen_range(0..s.len())];
            }
        }
        stats.push(total / n as f64);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((mean, quantile(&stats, tail), quantile(&stats, 1.0 - tail)))
}
