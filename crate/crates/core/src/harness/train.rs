//! Offline training of DT, AD and RA-DT policies.

use log::{debug, info};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use radt_nn::{AdamW, Dropout, RngState};

use crate::datagen::Dataset;
use crate::embed::EmbeddingModel;
use crate::envs::GridTask;
use crate::error::{RadtError, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::memory::{
    chunk, chunk_offsets, regularize_query, similarity_cutoff, EpisodeRef, RetrievalConfig, UtilityMode, VectorIndex,
};
use crate::policy::{ad_build_pair, ad_sequence, tokenize, PolicyModel, RetrievedContext, TokenBatch};
use crate::seeds::rng_for;
use crate::traj::{Episode, Segment};

/// Training episodes grouped per task in stream order.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub tasks: Vec<GridTask>,
    pub episodes: Vec<Episode>,
    pub by_task: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let n_tasks = ds.manifest.tasks.iter().map(|t| t.task_id + 1).max().unwrap_or(0);
        let mut tasks = vec![None; n_tasks];
        for t in &ds.manifest.tasks {
            tasks[t.task_id] = Some(t.task.clone());
        }
        let tasks: Vec<GridTask> = tasks
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| RadtError::Dataset(format!("task ids are not contiguous: {i} missing"))))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..ds.episodes.len()).collect();
        order.sort_by_key(|&i| (ds.episodes[i].task_id, ds.episodes[i].episode_id));
        let episodes: Vec<Episode> =
            order.iter().map(|&i| Episode::from_record(&ds.episodes[i], &tasks[ds.episodes[i].task_id])).collect();
        let mut by_task = vec![Vec::new(); tasks.len()];
        for (i, ep) in episodes.iter().enumerate() {
            by_task[ep.task_id].push(i);
        }
        if episodes.is_empty() {
            return Err(RadtError::Empty("dataset has no episodes".into()));
        }
        Ok(TrainData { tasks, episodes, by_task })
    }
}

/// Key/value memory over the training data, deduplicated per `cfg`.
/// Returns the index and the number of dropped entries.
pub fn build_training_index(data: &TrainData, g: &EmbeddingModel, cfg: &RetrievalConfig) -> Result<(VectorIndex, usize)> {
    let mut index = VectorIndex::new(g.dim());
    let eps: Vec<(&Episode, u64)> = data.episodes.iter().enumerate().map(|(i, e)| (e, i as u64)).collect();
    index.add_episodes(&eps, g, cfg.context_steps)?;
    let dropped = if cfg.dedup { index.deduplicate(cfg.dedup_threshold) } else { 0 };
    info!("index holds {} entries ({dropped} dropped as duplicates)", index.len());
    Ok((index, dropped))
}

/// Where cross-attention contexts come from during training.
pub enum ContextSource<'a> {
    None,
    Retrieval { index: &'a VectorIndex, g: &'a EmbeddingModel },
    Sample { same_task: bool },
}

pub struct TrainOutcome {
    pub model: PolicyModel<f32>,
    /// Mean action cross-entropy per gradient step.
    pub losses: Vec<f64>,
    pub digest: u64,
    /// Batch elements that received a non-empty context, per step.
    pub context_hits: Vec<usize>,
}

/// One sub-trajectory of a batch: episode index and step range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRef {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
}

/// Uniform episode, uniform end step in `1..=len`, at most `c` steps.
pub fn sample_segment<R: Rng>(data: &TrainData, c: usize, rng: &mut R) -> SegmentRef {
    let episode = rng.gen_range(0..data.episodes.len());
    let len = data.episodes[episode].len();
    let end = rng.gen_range(1..=len);
    SegmentRef { episode, start: end.saturating_sub(c), end }
}

fn resolve(data: &TrainData, s: &SegmentRef) -> Segment {
    data.episodes[s.episode].steps.slice(s.start, s.end)
}

/// Random entry of `task` from an episode other than `own`.
fn random_other(index: &VectorIndex, task: usize, own: EpisodeRef, rng: &mut ChaCha8Rng) -> Option<usize> {
    for _ in 0..16 {
        let i = index.random_entry(Some(task), rng)?;
        if index.entry(i).episode() != own {
            return Some(i);
        }
    }
    None
}

/// Contexts for one training batch by retrieval from the training index.
pub fn retrieve_contexts(
    index: &VectorIndex,
    g: &EmbeddingModel,
    cfg: &RetrievalConfig,
    data: &TrainData,
    batch: &[SegmentRef],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<Segment>>> {
    let mut out: Vec<Option<Segment>> = vec![None; batch.len()];
    let mut queried = Vec::new();
    for (bi, s) in batch.iter().enumerate() {
        let ep = &data.episodes[s.episode];
        let own = EpisodeRef { task_id: ep.task_id, episode_id: ep.episode_id };
        if s.end < cfg.min_len {
            out[bi] = random_other(index, ep.task_id, own, rng).map(|i| index.entry(i).value.clone());
        } else {
            queried.push(bi);
        }
    }
    if queried.is_empty() || index.is_empty() {
        return Ok(out);
    }
    let segs: Vec<Segment> = queried.iter().map(|&bi| resolve(data, &batch[bi])).collect();
    let refs: Vec<&Segment> = segs.iter().collect();
    let mut q = g.embed_batch_dropped(&refs, cfg.query_dropout, rng as &mut dyn RngCore)?;
    let d = g.dim();
    if cfg.blend > 0.0 {
        for row in q.chunks_mut(d) {
            let blended = regularize_query(row, cfg.blend, index, rng);
            row.copy_from_slice(&blended);
        }
    }
    let excludes: Vec<Option<EpisodeRef>> = queried
        .iter()
        .map(|&bi| {
            let ep = &data.episodes[batch[bi].episode];
            Some(EpisodeRef { task_id: ep.task_id, episode_id: ep.episode_id })
        })
        .collect();
    let cands = index.search_batch(&q, cfg.fetch_m(), &excludes)?;
    for (&bi, c) in queried.iter().zip(cands) {
        let task = data.episodes[batch[bi].episode].task_id;
        let kept = similarity_cutoff(&c, cfg.cutoff, cfg.top_l);
        let best = index.reweight_select(&kept, UtilityMode::Task(task), cfg.alpha, cfg.top_k);
        out[bi] = best.first().map(|s| index.entry(s.idx).value.clone());
    }
    Ok(out)
}

/// Contexts drawn without search: a random chunk of another episode, from
/// the same task or from any task.
pub fn sample_contexts(
    data: &TrainData,
    c: usize,
    same_task: bool,
    batch: &[SegmentRef],
    rng: &mut ChaCha8Rng,
) -> Vec<Option<Segment>> {
    batch
        .iter()
        .map(|s| {
            let task = data.episodes[s.episode].task_id;
            let pool = &data.by_task[task];
            let pick = |rng: &mut ChaCha8Rng| {
                if same_task {
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    rng.gen_range(0..data.episodes.len())
                }
            };
            let candidates = if same_task { pool.len() } else { data.episodes.len() };
            if candidates < 2 {
                return None;
            }
            let mut e = pick(rng);
            while e == s.episode {
                e = pick(rng);
            }
            let steps = &data.episodes[e].steps;
            let offsets: Vec<usize> = chunk_offsets(steps.len(), c).collect();
            let offset = offsets[rng.gen_range(0..offsets.len())];
            Some(chunk(steps, offset, c).1)
        })
        .collect()
}

/// AD sequences: an episode followed by the one `k` episodes later in the
/// same task stream; only the later episode carries action targets.
pub fn ad_batch<R: Rng>(data: &TrainData, k: usize, b: usize, steps: usize, rng: &mut R) -> Result<TokenBatch> {
    let eligible: Vec<usize> = (0..data.by_task.len()).filter(|&t| data.by_task[t].len() > k).collect();
    if eligible.is_empty() {
        return Err(RadtError::Config(format!("no task stream has more than {k} episodes")));
    }
    let mut seqs = Vec::with_capacity(b);
    let mut context_lens = Vec::with_capacity(b);
    for _ in 0..b {
        let task = eligible[rng.gen_range(0..eligible.len())];
        let stream = &data.by_task[task];
        let (i, j) = ad_build_pair(stream.len(), k, rng)?;
        let ctx = &data.episodes[stream[i]].steps;
        let (seq, n) = ad_sequence(ctx, &data.episodes[stream[j]].steps, ctx.len());
        seqs.push(seq);
        context_lens.push(n);
    }
    let refs: Vec<&Segment> = seqs.iter().collect();
    let mut tb = tokenize(&refs, steps, crate::policy::Layout::StateActionReward)?;
    for (bi, &n) in context_lens.iter().enumerate() {
        for t in 0..n {
            tb.targets[bi * steps + t] = None;
        }
    }
    Ok(tb)
}

/// Periodic callback with the step count and the current model.
pub type EvalHook<'a> = &'a mut dyn FnMut(u64, &PolicyModel<f32>) -> Result<()>;

/// Sequential training for one seed.
///
/// `on_eval` runs every `train.eval_every` steps with the step count and the
/// current model.
pub fn train(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &TrainData,
    source: ContextSource<'_>,
    mut on_eval: Option<EvalHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pcfg = cfg.policy_config();
    match (&source, cfg.method) {
        (ContextSource::None, m) if m.is_retrieval_augmented() => {
            return Err(RadtError::Config(format!("{m} needs a context source")));
        }
        (ContextSource::Retrieval { .. } | ContextSource::Sample { .. }, m) if !m.is_retrieval_augmented() => {
            return Err(RadtError::Config(format!("{m} has no cross-attention")));
        }
        _ => {}
    }
    let mut init_rng = rng_for(seed, "init", 0);
    let mut model = PolicyModel::<f32>::new(pcfg, &mut init_rng)?;
    let mut opt = AdamW::new(cfg.train.optimizer, &model.params);
    let mut batch_rng = rng_for(seed, "batch", 0);
    let mut ctx_rng = rng_for(seed, "context", 0);
    let mut drop_rng = rng_for(seed, "dropout", 0);
    let c = cfg.model.context_steps;
    let b = cfg.train.batch_size;
    let mut losses = Vec::with_capacity(cfg.train.gradient_steps as usize);
    let mut context_hits = Vec::with_capacity(cfg.train.gradient_steps as usize);
    for step in 1..=cfg.train.gradient_steps {
        let (tb, ctx) = if cfg.method == Method::Ad {
            (ad_batch(data, cfg.train.ad_k, b, pcfg.context_steps, &mut batch_rng)?, None)
        } else {
            let refs: Vec<SegmentRef> = (0..b).map(|_| sample_segment(data, c, &mut batch_rng)).collect();
            let segs: Vec<Segment> = refs.iter().map(|s| resolve(data, s)).collect();
            let seg_refs: Vec<&Segment> = segs.iter().collect();
            let tb = tokenize(&seg_refs, c, pcfg.layout)?;
            let values = match &source {
                ContextSource::None => None,
                ContextSource::Retrieval { index, g } => {
                    Some(retrieve_contexts(index, g, &cfg.retrieval, data, &refs, &mut ctx_rng)?)
                }
                ContextSource::Sample { same_task } => Some(sample_contexts(data, c, *same_task, &refs, &mut ctx_rng)),
            };
            let ctx = match values {
                Some(v) => {
                    let opt_refs: Vec<Option<&Segment>> = v.iter().map(|s| s.as_ref()).collect();
                    Some(RetrievedContext::new(&opt_refs, pcfg.retrieved_steps, pcfg.layout)?)
                }
                None => None,
            };
            (tb, ctx)
        };
        context_hits.push(ctx.as_ref().map_or(0, |c| c.present.iter().filter(|&&p| p).count()));
        let mut drop = Dropout { p: pcfg.dropout, rng: Some(&mut drop_rng) };
        let loss = model.loss_and_grad(&tb, ctx.as_ref(), &mut drop);
        if !loss.is_finite() {
            return Err(RadtError::NonFiniteLoss { step });
        }
        let norm = model.apply_update(&mut opt, cfg.train.grad_clip)?;
        losses.push(loss);
        if step % 100 == 0 || step == 1 {
            info!("{} seed {seed} step {step}: loss {loss:.4}", cfg.method);
        }
        debug!("step {step}: loss {loss:.6} grad norm {norm:.4} lr {:.3e}", opt.current_lr());
        if cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 && step < cfg.train.gradient_steps {
            if let Some(f) = on_eval.as_mut() {
                f(step, &model)?;
            }
        }
    }
    let digest = model.to_checkpoint(Some(RngState::capture(&batch_rng))).digest()?;
    Ok(TrainOutcome { model, losses, digest, context_hits })
}
