//! Orchestration: datasets, training, in-context evaluation and reporting.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod export;
pub mod metrics;
pub mod train;

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use radt_nn::Checkpoint;
use serde::Serialize;

pub use ablate::{variants, Ablation};
pub use config::{
    DatasetConfig, EmbeddingConfig, EnvConfig, EvalConfig, EvalTasks, ExperimentConfig, Method, ModelConfig, TrainConfig,
};
pub use eval::{icl_evaluate, EvalOutcome, EvalSetup, Rollout};
pub use export::{export_attention, export_results, read_results};
pub use metrics::{bootstrap_ci, TrialCurve, TrialRecord, TrialSummary};
pub use train::{build_training_index, train, ContextSource, TrainData, TrainOutcome};

use crate::datagen::{generate_dataset, read_dataset, write_dataset, Dataset};
use crate::embed::{DomainAgnostic, EmbeddingModel, EncoderConfig, FrozenEncoder};
use crate::envs::GridTask;
use crate::error::{RadtError, Result};
use crate::policy::PolicyModel;
use crate::seeds::split_seed;

/// Reads the configured dataset, generating and writing it first when the
/// directory has no manifest.
pub fn load_or_generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (train_tasks, _) = cfg.env.tasks()?;
    let dir = &cfg.dataset.path;
    if dir.join("manifest.json").exists() {
        let ds = read_dataset(dir)?;
        let stored: Vec<&GridTask> = ds.manifest.tasks.iter().map(|t| &t.task).collect();
        if stored != train_tasks.iter().collect::<Vec<_>>() {
            return Err(RadtError::Config(format!("dataset at {} was built for other tasks", dir.display())));
        }
        return Ok(ds);
    }
    generate(cfg)
}

/// Generates the training dataset and writes it to `dataset.path`.
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (train_tasks, _) = cfg.env.tasks()?;
    let ds = generate_dataset(&train_tasks, cfg.dataset.transitions_per_task, cfg.dataset.seed, &cfg.dataset.qlearning)?;
    write_dataset(&ds, &cfg.dataset.path)?;
    info!("wrote {} episodes to {}", ds.episodes.len(), cfg.dataset.path.display());
    Ok(ds)
}

/// Tasks to evaluate with their ids. Held-out tasks are numbered after the
/// training tasks.
pub fn eval_tasks(cfg: &ExperimentConfig) -> Result<Vec<(usize, GridTask)>> {
    let (train_tasks, held_out) = cfg.env.tasks()?;
    let mut tasks: Vec<(usize, GridTask)> = match cfg.eval.tasks {
        EvalTasks::Train => train_tasks.into_iter().enumerate().collect(),
        EvalTasks::Eval => held_out.into_iter().enumerate().map(|(i, t)| (cfg.env.n_train + i, t)).collect(),
    };
    if let Some(n) = cfg.eval.max_tasks {
        tasks.truncate(n);
    }
    if tasks.is_empty() {
        return Err(RadtError::Config("no evaluation tasks selected".into()));
    }
    Ok(tasks)
}

#[derive(Serialize)]
struct TrainingKey<'a> {
    env: &'a EnvConfig,
    dataset: &'a DatasetConfig,
    method: Method,
    model: &'a ModelConfig,
    retrieval: Option<&'a crate::memory::RetrievalConfig>,
    train: &'a TrainConfig,
    embedding: Option<&'a EmbeddingConfig>,
}

/// Checkpoint location keyed by every field that influences training, so
/// evaluation-only variants share one trained model. Retrieval and embedding
/// settings do not affect DT and AD training.
pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let ra = cfg.method.is_retrieval_augmented();
    let key = TrainingKey {
        env: &cfg.env,
        dataset: &cfg.dataset,
        method: cfg.method,
        model: &cfg.model,
        retrieval: ra.then_some(&cfg.retrieval),
        train: &cfg.train,
        embedding: ra.then_some(&cfg.embedding),
    };
    let digest = split_seed(0, &serde_json::to_string(&key)?, 0);
    Ok(cfg.out_dir.join("checkpoints").join(format!("{}-{digest:016x}-seed{seed}.ckpt", cfg.method)))
}

/// Domain-specific embedder: the configured DT checkpoint, or a DT trained
/// with this experiment's settings (cached next to the other checkpoints).
pub fn domain_specific_embedder(cfg: &ExperimentConfig, seed: u64, data: &TrainData) -> Result<EmbeddingModel> {
    let model = match &cfg.embedding.dt_checkpoint {
        Some(p) => PolicyModel::from_checkpoint(&Checkpoint::load(p)?)?,
        None => train_or_load(&cfg.embedder_config(), seed, data)?.0,
    };
    Ok(EmbeddingModel::domain_specific(model))
}

pub fn domain_agnostic_embedder(cfg: &ExperimentConfig) -> Result<EmbeddingModel> {
    let encoder = match &cfg.embedding.encoder {
        Some(p) => FrozenEncoder::load(p)?,
        None => FrozenEncoder::random(EncoderConfig { seed: cfg.embedding.encoder_seed, ..EncoderConfig::default() })?,
    };
    let p = cfg.policy_config();
    let h = cfg.env.episode_len();
    let a = DomainAgnostic::new(encoder, p.n_states, p.layout, p.rtg_scale, h, cfg.embedding.beta, cfg.embedding.encoder_seed)?;
    Ok(EmbeddingModel::DomainAgnostic(Box::new(a)))
}

/// Embedding model used by `cfg.method`, if any.
pub fn embedder(cfg: &ExperimentConfig, seed: u64, data: &TrainData) -> Result<Option<EmbeddingModel>> {
    if cfg.method.needs_domain_specific_embedder() {
        Ok(Some(domain_specific_embedder(cfg, seed, data)?))
    } else if cfg.method == Method::RaDtDomainAgnostic {
        Ok(Some(domain_agnostic_embedder(cfg)?))
    } else {
        Ok(None)
    }
}

/// Trains one seed, reusing a cached checkpoint for the same training
/// settings. Returns the model and the loss log (empty when cached).
pub fn train_or_load(cfg: &ExperimentConfig, seed: u64, data: &TrainData) -> Result<(PolicyModel<f32>, Vec<f64>)> {
    let path = checkpoint_path(cfg, seed)?;
    if path.exists() {
        info!("loading {}", path.display());
        return Ok((PolicyModel::from_checkpoint(&Checkpoint::load(&path)?)?, Vec::new()));
    }
    let g = embedder(cfg, seed, data)?;
    let index = match (cfg.method, &g) {
        (Method::RaDtDomainSpecific | Method::RaDtDomainAgnostic, Some(g)) => {
            Some(build_training_index(data, g, &cfg.retrieval)?.0)
        }
        _ => None,
    };
    let source = match cfg.method {
        Method::Dt | Method::Ad => ContextSource::None,
        Method::RaDtSampleSameTask => ContextSource::Sample { same_task: true },
        Method::RaDtSampleUniform => ContextSource::Sample { same_task: false },
        _ => ContextSource::Retrieval {
            index: index.as_ref().expect("index built"),
            g: g.as_ref().expect("embedder built"),
        },
    };
    let out = train(cfg, seed, data, source, None)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    out.model.to_checkpoint(None).save(&path)?;
    std::fs::write(path.with_extension("loss.json"), serde_json::to_string(&out.losses)?)?;
    Ok((out.model, out.losses))
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

pub struct ExperimentResult {
    pub curve: TrialCurve,
    pub outcomes: Vec<(u64, EvalOutcome)>,
    pub timings: Vec<SeedTiming>,
}

/// Evaluates an already trained model for one seed.
pub fn evaluate_seed(cfg: &ExperimentConfig, seed: u64, model: &PolicyModel<f32>, data: &TrainData) -> Result<EvalOutcome> {
    let g = if cfg.method.is_retrieval_augmented() && cfg.eval.retrieval { embedder(cfg, seed, data)? } else { None };
    let tasks = eval_tasks(cfg)?;
    let setup = EvalSetup { method: cfg.method, eval: &cfg.eval, retrieval: &cfg.retrieval, g: g.as_ref() };
    icl_evaluate(model, &tasks, seed, &setup)
}

/// Train (or load) and evaluate every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let ds = load_or_generate_dataset(cfg)?;
    let data = TrainData::from_dataset(&ds)?;
    let mut curve = TrialCurve::new(cfg.method.name(), cfg.eval.trials);
    let mut outcomes = Vec::new();
    let mut timings = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let (model, _) = train_or_load(cfg, seed, &data)?;
        let t1 = Instant::now();
        let outcome = evaluate_seed(cfg, seed, &model, &data)?;
        let t2 = Instant::now();
        curve.add(seed, &outcome);
        outcomes.push((seed, outcome));
        timings.push(SeedTiming {
            seed,
            train_secs: (t1 - t0).as_secs_f64(),
            eval_secs: (t2 - t1).as_secs_f64(),
        });
    }
    curve.validate()?;
    Ok(ExperimentResult { curve, outcomes, timings })
}
