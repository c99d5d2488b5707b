use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Linear warm-up to `peak`, then cosine decay to `floor` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { peak: lr, warmup_steps: 0, total_steps: 0, floor: lr }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if self.total_steps == 0 { self.peak } else { self.floor };
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            schedule: LrSchedule { peak: 1e-4, warmup_steps: 4000, total_steps: 100_000, floor: 1e-6 },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Learning rate that the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.is_frozen() {
            return Err(NnError::Frozen);
        }
        if self.m.len() != params.len() {
            return Err(NnError::Shape("optimizer state does not match parameter store".into()));
        }
        if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(NnError::NonFiniteGradient(p.name.clone()));
        }
        let lr = self.cfg.schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::of(1.0 - b1.powi(t));
        let bc2 = T::of(1.0 - b2.powi(t));
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let lr_t = T::of(lr);
        let eps = T::of(self.cfg.eps);
        let wd = T::of(lr * self.cfg.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1t * m[i] + one_b1 * g;
                v[i] = b2t * v[i] + one_b2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if p.decay {
                    let w = p.value[i];
                    p.value[i] -= wd * w;
                }
                p.value[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let id = ps.add("x", &[vals.len()], Init::Zeros, true, &mut rng);
        ps.get_mut(id).value.copy_from_slice(vals);
        ps
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { peak: 1e-4, warmup_steps: 4000, total_steps: 100_000, floor: 1e-6 };
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(4000) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(2000) - 5e-5).abs() < 1e-18);
        assert!((s.lr_at(100_000) - 1e-6).abs() < 1e-18);
        assert!((s.lr_at(u64::MAX / 2) - 1e-6).abs() < 1e-18);
        assert!(s.lr_at(50_000) < 1e-4 && s.lr_at(50_000) > 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = store(&[0.3, -1.2, 4.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, schedule: LrSchedule::constant(0.1), ..Default::default() };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..10 {
            opt.step(&mut ps).unwrap();
        }
        assert_eq!(ps.value(crate::params::ParamId(0)), &[0.3, -1.2, 4.0]);
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // loss = (x - 3)^2, minimizer x* = 3
        let mut ps = store(&[-2.0]);
        let cfg = AdamWConfig {
            schedule: LrSchedule { peak: 0.1, warmup_steps: 0, total_steps: 500, floor: 1e-6 },
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..500 {
            let x = ps.value(crate::params::ParamId(0))[0];
            ps.grad_mut(crate::params::ParamId(0))[0] = 2.0 * (x - 3.0);
            opt.step(&mut ps).unwrap();
        }
        let x = ps.value(crate::params::ParamId(0))[0];
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = store(&[1.0]);
        ps.grad_mut(crate::params::ParamId(0))[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }

    #[test]
    fn frozen_store_rejects_updates() {
        let mut ps = store(&[1.0]);
        ps.freeze();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        assert!(matches!(opt.step(&mut ps), Err(NnError::Frozen)));
    }

    #[test]
    fn clipping() {
        let mut ps = store(&[0.0, 0.0]);
        ps.grad_mut(crate::params::ParamId(0)).copy_from_slice(&[0.06, 0.08]);
        assert!((clip_global_norm(&mut ps, 0.25) - 0.1).abs() < 1e-15);
        assert_eq!(ps.get(crate::params::ParamId(0)).grad, vec![0.06, 0.08]);
        ps.grad_mut(crate::params::ParamId(0)).copy_from_slice(&[0.6, 0.8]);
        clip_global_norm(&mut ps, 0.25);
        assert!((ps.grad_norm() - 0.25).abs() < 1e-9);
    }
}
