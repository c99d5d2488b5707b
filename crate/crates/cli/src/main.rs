use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use radt::harness::{
    self, export_attention, export_results, read_results, train_or_load, variants, Ablation, ExperimentConfig, Method,
    TrainData, TrialCurve,
};
use radt::memory::EpisodeRef;
use radt::policy::Decode;
use radt::RadtError;

#[derive(Parser)]
#[command(name = "radt", version, about = "Retrieval-augmented decision transformer on dark grid worlds")]
struct Cli {
    /// Print wall-clock time per phase.
    #[arg(long, global = true)]
    time: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default experiment config as JSON.
    Config {
        #[arg(long, value_parser = parse_method, default_value = "ra-dt-domain-specific")]
        method: Method,
        /// Full-size model and training budget instead of the desk preset.
        #[arg(long)]
        full: bool,
    },
    /// Generate the training dataset.
    Generate(Overrides),
    /// Train one checkpoint per seed.
    Train(Overrides),
    /// Train (or load) and run in-context evaluation; writes results CSV/JSON.
    Evaluate(Overrides),
    /// Run a preset sweep and write combined results.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_parser = parse_ablation)]
        ablate: Ablation,
    },
    /// Summarize a results CSV; optionally dump cross-attention maps.
    Report {
        /// `results.csv` or the directory holding it.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Export cross-attention for the configured checkpoint.
        #[arg(long)]
        attention: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Sample,
    Argmax,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Experiment config JSON; desk-scale defaults for `--method` when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    cadence: Option<usize>,
    /// Reweighting weight: the training weight for `train` and `ablate`,
    /// the inference weight for `evaluate`.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    decode: Option<DecodeArg>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: RadtError| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: RadtError| e.to_string())
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Train,
    Eval,
}

impl Overrides {
    fn load(&self, stage: Stage) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::desk(self.method.unwrap_or(Method::RaDtDomainSpecific)),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(t) = self.trials {
            cfg.eval.trials = t;
        }
        if let Some(c) = self.cadence {
            cfg.eval.cadence = c;
        }
        if let Some(a) = self.alpha {
            match stage {
                Stage::Train => cfg.retrieval.alpha = a,
                Stage::Eval => cfg.eval.alpha = a,
            }
        }
        if let Some(d) = self.decode {
            cfg.eval.decode = match d {
                DecodeArg::Sample => Decode::Sample,
                DecodeArg::Argmax => Decode::Argmax,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Timer {
    on: bool,
    phases: Vec<(String, f64)>,
}

impl Timer {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        self.phases.push((name.to_string(), t0.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn report(&self) {
        if self.on {
            for (name, secs) in &self.phases {
                eprintln!("time {name}: {secs:.2}s");
            }
        }
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    Ok(TrainData::from_dataset(&harness::load_or_generate_dataset(cfg)?)?)
}

fn print_curve(curve: &TrialCurve) -> Result<()> {
    let summary = curve.summarize(harness::metrics::DEFAULT_RESAMPLES, harness::metrics::DEFAULT_LEVEL, 0)?;
    if let (Some(first), Some(last)) = (summary.first(), summary.last()) {
        println!(
            "{:<28} trial 1: {:7.2} [{:.2}, {:.2}]   trial {}: {:7.2} [{:.2}, {:.2}]",
            curve.method, first.mean, first.lo, first.hi, last.trial, last.mean, last.lo, last.hi
        );
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, timer: &mut Timer) -> Result<TrialCurve> {
    let data = timer.run("dataset", || load_data(cfg))?;
    let mut curve = TrialCurve::new(cfg.method.name(), cfg.eval.trials);
    for &seed in &cfg.seeds {
        let (model, _) = timer.run(&format!("train seed {seed}"), || Ok(train_or_load(cfg, seed, &data)?))?;
        let outcome =
            timer.run(&format!("evaluate seed {seed}"), || Ok(harness::evaluate_seed(cfg, seed, &model, &data)?))?;
        curve.add(seed, &outcome);
    }
    curve.validate()?;
    Ok(curve)
}

fn write_results(curves: &[TrialCurve], dir: &Path) -> Result<()> {
    export_results(curves, dir, 0)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn attention(cfg: &ExperimentConfig) -> Result<()> {
    if !matches!(cfg.method, Method::RaDtDomainSpecific | Method::RaDtDomainAgnostic) {
        bail!("attention export needs a retrieval method, got {}", cfg.method);
    }
    let data = load_data(cfg)?;
    let seed = cfg.seeds[0];
    let (model, _) = train_or_load(cfg, seed, &data)?;
    let g = harness::embedder(cfg, seed, &data)?.context("retrieval method without embedder")?;
    let (index, _) = harness::build_training_index(&data, &g, &cfg.retrieval)?;
    let ep = &data.episodes[data.by_task[0][data.by_task[0].len() - 1]];
    let c = cfg.model.context_steps;
    let input = ep.steps.slice(0, c.min(ep.len()));
    let own = EpisodeRef { task_id: ep.task_id, episode_id: ep.episode_id };
    let cands = index.retrieve(&g.embed(&input)?, &cfg.retrieval, radt::memory::UtilityMode::Task(ep.task_id), Some(own), true)?;
    let best = cands.first().context("no retrievable context")?;
    let dir = cfg.results_dir().join("attention");
    for p in export_attention(&model, &input, &index.entry(best.idx).value, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut timer = Timer { on: cli.time, phases: Vec::new() };
    match cli.command {
        Command::Config { method, full } => {
            let cfg = if full { ExperimentConfig::full_scale(method) } else { ExperimentConfig::desk(method) };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Generate(o) => {
            let cfg = o.load(Stage::Train)?;
            let ds = timer.run("generate", || Ok(harness::generate(&cfg)?))?;
            println!("{} episodes over {} tasks in {}", ds.episodes.len(), ds.manifest.tasks.len(), cfg.dataset.path.display());
        }
        Command::Train(o) => {
            let cfg = o.load(Stage::Train)?;
            let data = timer.run("dataset", || load_data(&cfg))?;
            for &seed in &cfg.seeds {
                timer.run(&format!("train seed {seed}"), || Ok(train_or_load(&cfg, seed, &data)?))?;
                println!("{}", harness::checkpoint_path(&cfg, seed)?.display());
            }
        }
        Command::Evaluate(o) => {
            let cfg = o.load(Stage::Eval)?;
            let curve = evaluate(&cfg, &mut timer)?;
            print_curve(&curve)?;
            write_results(&[curve], &cfg.results_dir())?;
        }
        Command::Ablate { overrides, ablate } => {
            let base = overrides.load(Stage::Train)?;
            let mut curves = Vec::new();
            for (label, cfg) in variants(&base, ablate)? {
                info!("ablation {ablate}: {label}");
                let mut curve = evaluate(&cfg, &mut timer)?;
                curve.method = format!("{}[{label}]", cfg.method);
                curve.records.iter_mut().for_each(|r| r.method = curve.method.clone());
                print_curve(&curve)?;
                curves.push(curve);
            }
            write_results(&curves, &base.out_dir.join("results").join(format!("{}-ablate-{ablate}", base.name)))?;
        }
        Command::Report { results, attention: att, overrides } => {
            if let Some(path) = results {
                let csv = if path.is_dir() { path.join(harness::export::RESULTS_CSV) } else { path };
                let curves = read_results(&csv)?;
                for c in &curves {
                    print_curve(c)?;
                }
                let dir = csv.parent().unwrap_or(Path::new("."));
                export_results(&curves, dir, 0)?;
            } else if !att {
                bail!("report needs --results and/or --attention");
            }
            if att {
                attention(&overrides.load(Stage::Eval)?)?;
            }
        }
    }
    timer.report();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.chain().any(|c| matches!(c.downcast_ref::<RadtError>(), Some(RadtError::Invariant(_))));
            ExitCode::from(if invariant { 3 } else { 1 })
        }
    }
}
