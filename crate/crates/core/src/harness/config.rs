//! Declarative description of one experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use radt_nn::{AdamWConfig, LrSchedule};
use serde::{Deserialize, Serialize};

use crate::datagen::QLearningConfig;
use crate::envs::{task_split, GridTask, TaskKind};
use crate::error::{RadtError, Result};
use crate::memory::RetrievalConfig;
use crate::policy::{Decode, Layout, PolicyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dt,
    Ad,
    RaDtDomainSpecific,
    RaDtDomainAgnostic,
    /// Contexts drawn uniformly from other episodes of the same task.
    RaDtSampleSameTask,
    /// Contexts drawn uniformly from any task.
    RaDtSampleUniform,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Dt,
        Method::Ad,
        Method::RaDtDomainSpecific,
        Method::RaDtDomainAgnostic,
        Method::RaDtSampleSameTask,
        Method::RaDtSampleUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dt => "dt",
            Method::Ad => "ad",
            Method::RaDtDomainSpecific => "ra-dt-domain-specific",
            Method::RaDtDomainAgnostic => "ra-dt-domain-agnostic",
            Method::RaDtSampleSameTask => "ra-dt-sample-same-task",
            Method::RaDtSampleUniform => "ra-dt-sample-uniform",
        }
    }

    /// Uses cross-attention over retrieved or sampled contexts.
    pub fn is_retrieval_augmented(self) -> bool {
        !matches!(self, Method::Dt | Method::Ad)
    }

    /// Needs a pre-trained DT as its embedding model.
    pub fn needs_domain_specific_embedder(self) -> bool {
        matches!(self, Method::RaDtDomainSpecific | Method::RaDtSampleSameTask | Method::RaDtSampleUniform)
    }

    pub fn layout(self) -> Layout {
        match self {
            Method::Ad => Layout::StateActionReward,
            _ => Layout::RtgStateActionReward,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = RadtError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| RadtError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: TaskKind,
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub split_seed: u64,
}

impl EnvConfig {
    pub fn episode_len(&self) -> usize {
        self.width * self.height
    }

    pub fn tasks(&self) -> Result<(Vec<GridTask>, Vec<GridTask>)> {
        task_split(self.kind, self.width, self.height, self.n_train, self.n_eval, self.split_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub transitions_per_task: usize,
    pub seed: u64,
    pub qlearning: QLearningConfig,
}

/// Transformer size; the remaining policy fields follow from the env and method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub mlp_ratio: usize,
    pub context_steps: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gradient_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    /// Gradient steps between in-training evaluations (0 disables them).
    pub eval_every: u64,
    /// Episode gap between AD context and target episodes.
    pub ad_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTasks {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tasks: EvalTasks,
    /// Evaluate only the first `n` tasks of the chosen split.
    pub max_tasks: Option<usize>,
    pub trials: usize,
    pub decode: Decode,
    pub temperature: f64,
    /// `(mean, std)` of the initial target return; per-grid default when absent.
    pub target_return: Option<(f64, f64)>,
    /// Weight of return utility at inference.
    pub alpha: f64,
    /// Steps between retrievals.
    pub cadence: usize,
    /// Deduplicate the growing index after each trial.
    pub dedup: bool,
    /// When false, every step uses the empty-context path.
    pub retrieval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Pre-trained DT checkpoint for domain-specific methods; trained on
    /// demand under `out_dir` when absent.
    pub dt_checkpoint: Option<PathBuf>,
    /// Frozen encoder checkpoint for the domain-agnostic method; a seeded
    /// random encoder when absent.
    pub encoder: Option<PathBuf>,
    pub beta: f64,
    pub encoder_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub method: Method,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub embedding: EmbeddingConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Dark-Room 10x10 at the scale used for the ordering checks.
    pub fn desk(method: Method) -> Self {
        let steps = 20_000;
        ExperimentConfig {
            name: format!("darkroom10x10-{method}"),
            env: EnvConfig { kind: TaskKind::DarkRoom, width: 10, height: 10, n_train: 80, n_eval: 20, split_seed: 0 },
            dataset: DatasetConfig {
                path: PathBuf::from("data/darkroom10x10"),
                transitions_per_task: 20_000,
                seed: 0,
                qlearning: QLearningConfig::default(),
            },
            method,
            model: ModelConfig { layers: 2, heads: 4, d: 64, mlp_ratio: 4, context_steps: 50, dropout: 0.2 },
            retrieval: RetrievalConfig::default(),
            train: TrainConfig {
                gradient_steps: steps,
                batch_size: 64,
                grad_clip: 0.25,
                optimizer: AdamWConfig {
                    schedule: LrSchedule { peak: 1e-4, warmup_steps: 1000, total_steps: steps, floor: 1e-6 },
                    ..AdamWConfig::default()
                },
                eval_every: 5_000,
                ad_k: 100,
            },
            eval: EvalConfig {
                tasks: EvalTasks::Eval,
                max_tasks: None,
                trials: 40,
                decode: Decode::Sample,
                temperature: 1.0,
                target_return: None,
                alpha: 1.0,
                cadence: 1,
                dedup: false,
                retrieval: true,
            },
            embedding: EmbeddingConfig { dt_checkpoint: None, encoder: None, beta: crate::embed::DEFAULT_BETA, encoder_seed: 0 },
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs/darkroom10x10"),
        }
    }

    /// Full-size settings: 4 layers, 8 heads, width 512, 100K steps at batch
    /// 128 and 100K transitions per task. Long-running on a CPU.
    pub fn full_scale(method: Method) -> Self {
        let mut cfg = Self::desk(method);
        let steps = 100_000;
        cfg.name = format!("darkroom10x10-full-{method}");
        cfg.dataset.transitions_per_task = 100_000;
        cfg.dataset.path = PathBuf::from("data/darkroom10x10-full");
        cfg.model = ModelConfig { layers: 4, heads: 8, d: 512, ..cfg.model };
        cfg.train.gradient_steps = steps;
        cfg.train.batch_size = 128;
        cfg.train.eval_every = 25_000;
        cfg.train.optimizer.schedule = LrSchedule { peak: 1e-4, warmup_steps: 4000, total_steps: steps, floor: 1e-6 };
        cfg.out_dir = PathBuf::from("runs/darkroom10x10-full");
        cfg
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let h = self.env.episode_len();
        let ad = self.method == Method::Ad;
        let context_steps = if ad { 2 * h } else { self.model.context_steps };
        PolicyConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            d: self.model.d,
            mlp_ratio: self.model.mlp_ratio,
            context_steps,
            cross_attention: self.method.is_retrieval_augmented(),
            retrieved_steps: 2 * self.model.context_steps,
            dropout: self.model.dropout,
            n_states: self.env.width * self.env.height,
            max_timestep: if ad { 2 * h } else { h },
            rtg_scale: h as f32,
            layout: self.method.layout(),
        }
    }

    /// The DT whose hidden states embed queries and keys for domain-specific methods.
    pub fn embedder_config(&self) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.method = Method::Dt;
        cfg.name = format!("{}-embedder", self.name);
        cfg.embedding.dt_checkpoint = None;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RadtError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.env.n_train == 0 {
            return bad("at least one training task is required");
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.train.grad_clip.is_nan() || self.train.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.eval.trials == 0 || self.eval.cadence == 0 {
            return bad("trials and cadence must be positive");
        }
        if self.eval.temperature.is_nan() || self.eval.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.retrieval.context_steps != self.model.context_steps {
            return bad("retrieval.context_steps must equal model.context_steps");
        }
        if self.dataset.transitions_per_task < self.env.episode_len() {
            return bad("transitions_per_task is below one episode");
        }
        if self.method == Method::Ad {
            let episodes = self.dataset.transitions_per_task / self.env.episode_len();
            if self.train.ad_k == 0 || episodes < self.train.ad_k + 1 {
                return bad("AD needs at least ad_k + 1 episodes per task and ad_k >= 1");
            }
        }
        if let Some(p) = &self.embedding.dt_checkpoint {
            if !p.exists() {
                return Err(RadtError::Config(format!("embedding checkpoint {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.embedding.encoder {
            if !p.exists() {
                return Err(RadtError::Config(format!("encoder checkpoint {} does not exist", p.display())));
            }
        }
        self.retrieval.validate()?;
        self.policy_config().validate()?;
        self.env.tasks()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Directory for this experiment's result files.
    pub fn results_dir(&self) -> PathBuf {
        self.out_dir.join("results").join(&self.name)
    }
}
