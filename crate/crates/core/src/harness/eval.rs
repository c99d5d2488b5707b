//! In-context evaluation: repeated trials per task with a growing memory.

use log::info;
use rand_chacha::ChaCha8Rng;

use radt_nn::Dropout;

use crate::datagen::compute_rtg;
use crate::embed::EmbeddingModel;
use crate::envs::{Action, GridEnv, GridTask};
use crate::error::{RadtError, Result};
use crate::harness::config::{EvalConfig, Method};
use crate::memory::{RetrievalConfig, UtilityMode, VectorIndex};
use crate::policy::{decrement_rtg, sample_target_return, select_action, tokenize, PolicyModel, RetrievedContext};
use crate::seeds::rng_for;
use crate::traj::{Episode, Segment};

pub struct EvalSetup<'a> {
    pub method: Method,
    pub eval: &'a EvalConfig,
    pub retrieval: &'a RetrievalConfig,
    /// Embedding model for retrieval-augmented methods.
    pub g: Option<&'a EmbeddingModel>,
}

/// One evaluation episode as the agent experienced it; `steps.rtg` holds
/// the conditioning returns-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Segment,
    /// Conditioning return before each step at full precision.
    pub rtg: Vec<f64>,
    pub total_return: u64,
    /// Retrieval calls made during the episode.
    pub retrievals: usize,
    /// Steps that ran with a non-empty retrieved context.
    pub context_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub task_ids: Vec<usize>,
    /// `[task][trial]`.
    pub rollouts: Vec<Vec<Rollout>>,
    /// Index size after each trial, `[task][trial]`.
    pub index_sizes: Vec<Vec<usize>>,
}

impl EvalOutcome {
    /// Episode returns `[task][trial]`.
    pub fn returns(&self) -> Vec<Vec<f64>> {
        self.rollouts.iter().map(|r| r.iter().map(|x| x.total_return as f64).collect()).collect()
    }
}

struct TaskRun {
    task_id: usize,
    env: GridEnv,
    rng: ChaCha8Rng,
    index: Option<VectorIndex>,
    stored: usize,
    previous: Option<Segment>,
    traj: Segment,
    rtg_stream: Vec<f64>,
    rtg: f64,
    state: u32,
    ret: u64,
    retrievals: usize,
    context_steps: usize,
    context: Option<Segment>,
}

/// Runs `trials` sequential episodes on each task. Each task owns its
/// environment, memory and rng stream `rng_for(seed, "eval_task", task_id)`.
pub fn icl_evaluate(
    model: &PolicyModel<f32>,
    tasks: &[(usize, GridTask)],
    seed: u64,
    setup: &EvalSetup<'_>,
) -> Result<EvalOutcome> {
    let cfg = model.cfg();
    let ra = setup.method.is_retrieval_augmented();
    if ra != cfg.cross_attention {
        return Err(RadtError::Config(format!("{} does not match the checkpoint's cross-attention", setup.method)));
    }
    if cfg.layout != setup.method.layout() {
        return Err(RadtError::Config(format!("{} does not match the checkpoint's token layout", setup.method)));
    }
    let use_memory = ra && setup.eval.retrieval;
    let g = match (use_memory, setup.g) {
        (true, None) => return Err(RadtError::Config("retrieval needs an embedding model".into())),
        (true, Some(g)) => Some(g),
        _ => None,
    };
    let Some((_, first)) = tasks.first() else {
        return Err(RadtError::Empty("no evaluation tasks".into()));
    };
    let horizon = first.episode_len;
    if tasks.iter().any(|(_, t)| t.episode_len != horizon) {
        return Err(RadtError::Config("evaluation tasks must share one episode length".into()));
    }
    let c = setup.retrieval.context_steps;
    let per_episode = horizon.div_ceil(c);
    let ad = setup.method == Method::Ad;
    let steps_cap = cfg.context_steps;

    let mut runs: Vec<TaskRun> = tasks
        .iter()
        .map(|(id, task)| {
            Ok(TaskRun {
                task_id: *id,
                env: GridEnv::new(task.clone())?,
                rng: rng_for(seed, "eval_task", *id as u64),
                index: g.map(|g| VectorIndex::new(g.dim())),
                stored: 0,
                previous: None,
                traj: Segment::default(),
                rtg_stream: Vec::new(),
                rtg: 0.0,
                state: 0,
                ret: 0,
                retrievals: 0,
                context_steps: 0,
                context: None,
            })
        })
        .collect::<Result<_>>()?;
    let mut rollouts = vec![Vec::with_capacity(setup.eval.trials); tasks.len()];
    let mut index_sizes = vec![Vec::with_capacity(setup.eval.trials); tasks.len()];

    for trial in 0..setup.eval.trials {
        for run in runs.iter_mut() {
            let pos = run.env.reset();
            run.state = run.env.task().cell_index(pos) as u32;
            let task = run.env.task();
            run.rtg = if ad {
                0.0
            } else {
                sample_target_return(task.kind, task.width, task.height, setup.eval.target_return, &mut run.rng)?
            };
            run.traj = Segment::default();
            run.rtg_stream.clear();
            run.ret = 0;
            run.retrievals = 0;
            run.context_steps = 0;
            run.context = None;
        }
        for t in 0..horizon {
            if let Some(g) = g {
                if t % setup.eval.cadence == 0 {
                    retrieve_step(&mut runs, g, setup, t)?;
                }
            }
            let inputs: Vec<Segment> = runs.iter().map(|r| policy_input(r, t, steps_cap, ad)).collect::<Result<_>>()?;
            let refs: Vec<&Segment> = inputs.iter().collect();
            let tb = tokenize(&refs, steps_cap, cfg.layout)?;
            let ctx = if ra {
                let values: Vec<Option<&Segment>> = runs.iter().map(|r| r.context.as_ref()).collect();
                Some(RetrievedContext::new(&values, cfg.retrieved_steps, cfg.layout)?)
            } else {
                None
            };
            let fwd = model.forward(&tb, ctx.as_ref(), None, &mut Dropout::off());
            let na = crate::envs::NUM_ACTIONS;
            for (bi, run) in runs.iter_mut().enumerate() {
                let row = bi * steps_cap + inputs[bi].len() - 1;
                let logits = &fwd.logits[row * na..(row + 1) * na];
                let a = select_action(logits, setup.eval.decode, setup.eval.temperature, &mut run.rng);
                let res = run.env.step(Action::from_index(a).expect("action in range"))?;
                if run.context.is_some() {
                    run.context_steps += 1;
                }
                run.traj.push(run.state, a as u8, res.reward, run.rtg as f32, t as u32);
                run.rtg_stream.push(run.rtg);
                run.ret += res.reward as u64;
                run.rtg = if ad { 0.0 } else { decrement_rtg(run.rtg, res.reward as f64) };
                run.state = run.env.task().cell_index(res.obs) as u32;
            }
        }
        for (ti, run) in runs.iter_mut().enumerate() {
            if let (Some(index), Some(g)) = (run.index.as_mut(), g) {
                let mut stored = run.traj.clone();
                stored.rtg = compute_rtg(&stored.rewards).into_iter().map(|v| v as f32).collect();
                let ep = Episode { task_id: run.task_id, episode_id: trial as u64, steps: stored, total_return: run.ret };
                let added = index.add_episode(&ep, g, c, trial as u64)?;
                run.stored += added;
                if added != per_episode {
                    return Err(RadtError::Invariant(format!("episode added {added} entries, expected {per_episode}")));
                }
                if setup.eval.dedup {
                    index.deduplicate(setup.retrieval.dedup_threshold);
                } else if index.len() != run.stored {
                    return Err(RadtError::Invariant(format!(
                        "index of task {} holds {} entries after trial {}, expected {}",
                        run.task_id,
                        index.len(),
                        trial + 1,
                        run.stored
                    )));
                }
            }
            index_sizes[ti].push(run.index.as_ref().map_or(0, |i| i.len()));
            if ad {
                run.previous = Some(run.traj.clone());
            }
            rollouts[ti].push(Rollout {
                steps: std::mem::take(&mut run.traj),
                rtg: std::mem::take(&mut run.rtg_stream),
                total_return: run.ret,
                retrievals: run.retrievals,
                context_steps: run.context_steps,
            });
        }
        let mean = rollouts.iter().map(|r| r[trial].total_return as f64).sum::<f64>() / tasks.len() as f64;
        info!("{} seed {seed} trial {}: mean return {mean:.2}", setup.method, trial + 1);
    }
    Ok(EvalOutcome { task_ids: tasks.iter().map(|(id, _)| *id).collect(), rollouts, index_sizes })
}

/// Refreshes every task's retrieved context at step `t`.
fn retrieve_step(runs: &mut [TaskRun], g: &EmbeddingModel, setup: &EvalSetup<'_>, t: usize) -> Result<()> {
    let cfg = setup.retrieval;
    let c = cfg.context_steps;
    let mut queried = Vec::new();
    for (bi, run) in runs.iter_mut().enumerate() {
        run.retrievals += 1;
        let index = run.index.as_ref().expect("memory enabled");
        run.context = if index.is_empty() {
            None
        } else if t < cfg.min_len {
            index.random_entry(None, &mut run.rng).map(|i| index.entry(i).value.clone())
        } else {
            queried.push(bi);
            None
        };
    }
    if queried.is_empty() {
        return Ok(());
    }
    let segs: Vec<Segment> = queried.iter().map(|&bi| runs[bi].traj.slice(t.saturating_sub(c), t)).collect();
    let refs: Vec<&Segment> = segs.iter().collect();
    let q = g.embed_batch(&refs)?;
    for (&bi, q) in queried.iter().zip(q.chunks(g.dim())) {
        let run = &mut runs[bi];
        let index = run.index.as_ref().expect("memory enabled");
        let rcfg = RetrievalConfig { alpha: setup.eval.alpha, ..*cfg };
        let best = index.retrieve(q, &rcfg, UtilityMode::Return, None, false)?;
        if let Some(s) = best.first() {
            let e = index.entry(s.idx);
            if e.task_id != run.task_id {
                return Err(RadtError::Invariant(format!(
                    "retrieved an entry of task {} while evaluating task {}",
                    e.task_id, run.task_id
                )));
            }
            run.context = Some(e.value.clone());
        }
    }
    Ok(())
}

/// The policy input at step `t`: recent history plus the current state with
/// placeholder action and reward.
fn policy_input(run: &TaskRun, t: usize, cap: usize, ad: bool) -> Result<Segment> {
    let mut seg = if ad {
        let prev_len = run.previous.as_ref().map_or(0, |p| p.len());
        let mut s = match &run.previous {
            Some(p) => {
                let mut p = p.clone();
                p.timesteps = (0..prev_len as u32).collect();
                p
            }
            None => Segment::default(),
        };
        let mut cur = run.traj.clone();
        cur.timesteps = (prev_len as u32..(prev_len + cur.len()) as u32).collect();
        s.append(&cur);
        s.push(run.state, 0, 0, 0.0, (prev_len + t) as u32);
        s
    } else {
        let mut s = run.traj.slice((t + 1).saturating_sub(cap), t);
        s.push(run.state, 0, 0, run.rtg as f32, t as u32);
        s
    };
    if seg.len() > cap {
        if ad {
            return Err(RadtError::Invariant(format!("AD context of {} steps exceeds two episodes", seg.len())));
        }
        seg = seg.slice(seg.len() - cap, seg.len());
    }
    Ok(seg)
}
