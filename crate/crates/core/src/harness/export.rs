//! CSV/JSON result files and cross-attention dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use radt_nn::Dropout;

use crate::error::{RadtError, Result};
use crate::harness::metrics::{TrialCurve, TrialRecord, TrialSummary, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use crate::policy::{tokenize, PolicyModel, RetrievedContext};
use crate::traj::Segment;

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub trials: Vec<TrialSummary>,
}

fn csv_err(e: csv::Error) -> RadtError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RadtError::Io(io),
        other => RadtError::Dataset(format!("csv: {other:?}")),
    }
}

/// Writes `results.csv` with one row per (method, task, seed, trial) and
/// `summary.json` with per-trial mean and bootstrap interval per method.
pub fn export_results(curves: &[TrialCurve], dir: &Path, bootstrap_seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(RESULTS_CSV)).map_err(csv_err)?;
    let mut summaries = Vec::with_capacity(curves.len());
    for curve in curves {
        curve.validate()?;
        let mut rows: Vec<&TrialRecord> = curve.records.iter().collect();
        rows.sort_by_key(|r| (r.task, r.seed, r.trial));
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        summaries.push(MethodSummary {
            method: curve.method.clone(),
            trials: curve.summarize(DEFAULT_RESAMPLES, DEFAULT_LEVEL, bootstrap_seed)?,
        });
    }
    w.flush()?;
    let mut f = fs::File::create(dir.join(SUMMARY_JSON))?;
    f.write_all(serde_json::to_string_pretty(&summaries)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads `results.csv` back into one curve per method, in order of appearance.
pub fn read_results(path: &Path) -> Result<Vec<TrialCurve>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut curves: Vec<TrialCurve> = Vec::new();
    for rec in r.deserialize() {
        let rec: TrialRecord = rec.map_err(csv_err)?;
        let pos = match curves.iter().position(|c| c.method == rec.method) {
            Some(p) => p,
            None => {
                curves.push(TrialCurve::new(&rec.method, 0));
                curves.len() - 1
            }
        };
        let c = &mut curves[pos];
        c.trials = c.trials.max(rec.trial);
        c.records.push(rec);
    }
    Ok(curves)
}

/// Runs `input` (its last `C` steps) against `context` and writes one CSV
/// matrix per cross-attention layer, `cross_attention_layer{l}.csv`: rows are
/// input tokens, columns retrieved-context tokens, weights averaged over heads.
pub fn export_attention(model: &PolicyModel<f32>, input: &Segment, context: &Segment, dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = model.cfg();
    if !cfg.cross_attention {
        return Err(RadtError::Config("the checkpoint has no cross-attention layers".into()));
    }
    if input.is_empty() || context.is_empty() {
        return Err(RadtError::Empty("attention export needs a non-empty input and context".into()));
    }
    let start = input.len().saturating_sub(cfg.context_steps);
    let input = input.slice(start, input.len());
    let context = context.slice(0, context.len().min(cfg.retrieved_steps));
    let tb = tokenize(&[&input], cfg.context_steps, cfg.layout)?;
    let ctx = RetrievedContext::new(&[Some(&context)], cfg.retrieved_steps, cfg.layout)?;
    let fwd = model.forward(&tb, Some(&ctx), None, &mut Dropout::off());
    let k = cfg.layout.tokens_per_step();
    let (tq, s) = (tb.tokens(), ctx.tokens.tokens());
    let (rows, cols) = (input.len() * k, context.len() * k);
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let ca = fwd
            .cache
            .block(l)
            .cross_attention()
            .ok_or_else(|| RadtError::Invariant(format!("layer {l} ran without cross-attention")))?;
        let mut text = String::new();
        for i in 0..rows {
            let mut line = Vec::with_capacity(cols);
            for j in 0..cols {
                let mut w = 0.0f64;
                for h in 0..cfg.heads {
                    w += ca.head_probs(0, h, cfg.heads, tq, s)[i * s + j] as f64;
                }
                line.push(format!("{}", w / cfg.heads as f64));
            }
            text.push_str(&line.join(","));
            text.push('\n');
        }
        let path = dir.join(format!("cross_attention_layer{l}.csv"));
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}
