//! Central finite-difference verification of analytic gradients (double precision).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};

/// A scalar-valued graph over a parameter store.
pub trait ScalarGraph {
    /// False when the graph samples randomness (e.g. dropout) per evaluation.
    fn is_deterministic(&self) -> bool;

    /// Evaluate the loss. With `backward`, also accumulate analytic gradients
    /// into `params` (the caller zeroes them first).
    fn loss(&mut self, params: &mut ParamStore<f64>, backward: bool) -> f64;

    /// Loss after only tensor `changed` moved away from the values of the
    /// last backward call. Graphs may reuse activations that do not depend on it.
    fn perturbed_loss(&mut self, params: &mut ParamStore<f64>, changed: ParamId) -> f64 {
        let _ = changed;
        self.loss(params, false)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor for the relative error of near-zero gradients.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, max_entries_per_param: None, abs_floor: 1e-7, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub per_param: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn grad_check<G: ScalarGraph>(
    graph: &mut G,
    params: &mut ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if !graph.is_deterministic() {
        return Err(NnError::NonDeterministic);
    }
    params.zero_grad();
    graph.loss(params, true);
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), checked: 0, per_param: Vec::new() };
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let idx: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in idx {
            let id = ParamId(pi);
            let orig = params.value(id)[i];
            params.get_mut(id).value[i] = orig + opts.h;
            let up = graph.perturbed_loss(params, id);
            params.get_mut(id).value[i] = orig - opts.h;
            let down = graph.perturbed_loss(params, id);
            params.get_mut(id).value[i] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            worst = worst.max(relative_error(grads[i], numeric, opts.abs_floor));
            report.checked += 1;
        }
        let name = params.get(ParamId(pi)).name.clone();
        if worst >= report.max_rel_error {
            report.max_rel_error = worst;
            report.worst_param = name.clone();
        }
        report.per_param.push((name, worst));
    }
    Ok(report)
}
