//! Preset variant sweeps derived from a base experiment.

use std::fmt;
use std::str::FromStr;

use crate::error::{RadtError, Result};
use crate::harness::config::{ExperimentConfig, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Training-time reweighting weight.
    ReweightingAlpha,
    /// Environment steps between retrievals at evaluation.
    Cadence,
    /// Remove one of deduplication, similarity cut-off, query dropout.
    Regularizers,
    /// Retrieval against same-task and uniform sampling of contexts.
    Sampling,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::ReweightingAlpha, Ablation::Cadence, Ablation::Regularizers, Ablation::Sampling];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::ReweightingAlpha => "reweighting-alpha",
            Ablation::Cadence => "cadence",
            Ablation::Regularizers => "regularizers",
            Ablation::Sampling => "sampling",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = RadtError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| RadtError::Config(format!("unknown ablation `{s}`")))
    }
}

/// Labelled configs for one sweep. The base must be a retrieval method.
pub fn variants(base: &ExperimentConfig, ablation: Ablation) -> Result<Vec<(String, ExperimentConfig)>> {
    if !matches!(base.method, Method::RaDtDomainSpecific | Method::RaDtDomainAgnostic) {
        return Err(RadtError::Config(format!("ablations start from a retrieval method, not {}", base.method)));
    }
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.name = format!("{}-{label}", base.name);
        (label, c)
    };
    let out = match ablation {
        Ablation::ReweightingAlpha => [0.0, 0.25, 0.5, 1.0, 2.0]
            .into_iter()
            .map(|a| with(format!("alpha={a}"), &|c| c.retrieval.alpha = a))
            .collect(),
        Ablation::Cadence => {
            [1usize, 5, 25, 50].into_iter().map(|t| with(format!("cadence={t}"), &|c| c.eval.cadence = t)).collect()
        }
        Ablation::Regularizers => vec![
            with("all".into(), &|_| {}),
            with("no-dedup".into(), &|c| c.retrieval.dedup = false),
            with("no-cutoff".into(), &|c| c.retrieval.cutoff = 2.0),
            with("no-query-dropout".into(), &|c| c.retrieval.query_dropout = 0.0),
        ],
        Ablation::Sampling => [Method::RaDtDomainSpecific, Method::RaDtSampleSameTask, Method::RaDtSampleUniform]
            .into_iter()
            .map(|m| with(m.name().to_string(), &|c| c.method = m))
            .collect(),
    };
    Ok(out)
}
