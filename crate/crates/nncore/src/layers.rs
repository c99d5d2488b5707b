//! Dense building blocks with explicit forward and backward passes.
//!
//! Activations are row-major `[rows, features]` buffers. Backward functions
//! accumulate parameter gradients into the [`ParamStore`] and return the
//! gradient with respect to the layer input.

use rand::Rng;

use crate::params::{Init, ParamId, ParamStore};
use crate::real::{gemm, Real, View};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = ps.add(format!("{name}.w"), &[din, dout], Init::TruncNormal(INIT_STD), true, rng);
        let b = ps.add(format!("{name}.b"), &[dout], Init::Zeros, false, rng);
        Linear { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), n * self.din);
        let bias = ps.value(self.b);
        let mut y = Vec::with_capacity(n * self.dout);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(
            n,
            self.din,
            self.dout,
            T::one(),
            View::rows(x, 0, self.din),
            View::rows(ps.value(self.w), 0, self.dout),
            T::one(),
            &mut y,
            0,
            self.dout,
        );
        y
    }

    /// Accumulates `dW`, `db`; returns `dx` unless `need_dx` is false.
    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], dy: &[T], n: usize, need_dx: bool) -> Vec<T> {
        debug_assert_eq!(dy.len(), n * self.dout);
        {
            let gb = ps.grad_mut(self.b);
            for row in dy.chunks_exact(self.dout) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        gemm(
            self.din,
            n,
            self.dout,
            T::one(),
            View::trans(x, 0, self.din),
            View::rows(dy, 0, self.dout),
            T::one(),
            ps.grad_mut(self.w),
            0,
            self.dout,
        );
        if !need_dx {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); n * self.din];
        gemm(
            n,
            self.dout,
            self.din,
            T::one(),
            View::rows(dy, 0, self.dout),
            View::trans(ps.value(self.w), 0, self.dout),
            T::zero(),
            &mut dx,
            0,
            self.din,
        );
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub d: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        let g = ps.add(format!("{name}.g"), &[d], Init::Ones, false, rng);
        let b = ps.add(format!("{name}.b"), &[d], Init::Zeros, false, rng);
        LayerNorm { g, b, d }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], n: usize) -> (Vec<T>, LnCache<T>) {
        let d = self.d;
        let (g, b) = (ps.value(self.g), ps.value(self.b));
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(Self::EPS);
        let mut y = vec![T::zero(); n * d];
        let mut cache = LnCache { mean: Vec::with_capacity(n), rstd: Vec::with_capacity(n) };
        for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for i in 0..d {
                yr[i] = (xr[i] - mean) * rstd * g[i] + b[i];
            }
            cache.mean.push(mean);
            cache.rstd.push(rstd);
        }
        (y, cache)
    }

    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], cache: &LnCache<T>, dy: &[T], n: usize) -> Vec<T> {
        let d = self.d;
        let inv_d = T::one() / T::of(d as f64);
        let g = ps.value(self.g).to_vec();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut dx = vec![T::zero(); n * d];
        for r in 0..n {
            let xr = &x[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let (mean, rstd) = (cache.mean[r], cache.rstd[r]);
            let mut sum_dn = T::zero();
            let mut sum_dn_xhat = T::zero();
            for i in 0..d {
                let xhat = (xr[i] - mean) * rstd;
                let dn = dyr[i] * g[i];
                sum_dn += dn;
                sum_dn_xhat += dn * xhat;
                dgamma[i] += dyr[i] * xhat;
                dbeta[i] += dyr[i];
            }
            let mean_dn = sum_dn * inv_d;
            let mean_dn_xhat = sum_dn_xhat * inv_d;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for i in 0..d {
                let xhat = (xr[i] - mean) * rstd;
                dxr[i] = (dyr[i] * g[i] - mean_dn - xhat * mean_dn_xhat) * rstd;
            }
        }
        for (a, v) in ps.grad_mut(self.g).iter_mut().zip(dgamma) {
            *a += v;
        }
        for (a, v) in ps.grad_mut(self.b).iter_mut().zip(dbeta) {
            *a += v;
        }
        dx
    }
}

/// Lookup table `[rows, d]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, rows: usize, d: usize, rng: &mut R) -> Self {
        let table = ps.add(format!("{name}.table"), &[rows, d], Init::TruncNormal(INIT_STD), true, rng);
        Embedding { table, rows, d }
    }

    /// Adds the row for `idx` into `out`.
    #[inline]
    pub fn add_row<T: Real>(&self, ps: &ParamStore<T>, idx: usize, out: &mut [T]) {
        assert!(idx < self.rows, "embedding index {idx} out of range {}", self.rows);
        let row = &ps.value(self.table)[idx * self.d..(idx + 1) * self.d];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }

    #[inline]
    pub fn backward_row<T: Real>(&self, ps: &mut ParamStore<T>, idx: usize, dy: &[T]) {
        let d = self.d;
        let g = &mut ps.grad_mut(self.table)[idx * d..(idx + 1) * d];
        for (a, &v) in g.iter_mut().zip(dy) {
            *a += v;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU, evaluated as `x * sigmoid(2u)` which equals
/// `0.5 x (1 + tanh(u))`.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let c2 = T::of(2.0 * GELU_C);
    let k = T::of(0.044715);
    x.iter().map(|&v| v / (T::one() + (-c2 * (v + k * v * v * v)).exp())).collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let two = T::of(2.0);
    let three = T::of(3.0);
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = T::one() / (T::one() + (-two * c * (v + k * v * v * v)).exp());
            let du = c * (T::one() + three * k * v * v);
            d * (s + two * v * s * (T::one() - s) * du)
        })
        .collect()
}

/// Inverted-dropout mask: each entry is `0` or `1/(1-p)`.
pub fn dropout_mask<T: Real, R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect()
}

pub fn apply_mask<T: Real>(x: &mut [T], mask: &[T]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    // NaN propagates so a diverged row cannot masquerade as a masked one.
    #[allow(clippy::eq_op)]
    let max = v.iter().copied().fold(T::neg_infinity(), |a, x| if x > a || x != x { x } else { a });
    if max == T::neg_infinity() {
        v.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = if *x == T::neg_infinity() { T::zero() } else { (*x - max).exp() };
        sum += *x;
    }
    let inv = T::one() / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Mean softmax cross-entropy over rows that carry a target.
///
/// Returns `(loss, dlogits)`; rows without a target get zero gradient.
pub fn cross_entropy<T: Real>(logits: &[T], classes: usize, targets: &[Option<usize>]) -> (T, Vec<T>) {
    let n = targets.len();
    debug_assert_eq!(logits.len(), n * classes);
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut dlogits = vec![T::zero(); n * classes];
    if count == 0 {
        return (T::zero(), dlogits);
    }
    let inv = T::one() / T::of(count as f64);
    let mut loss = T::zero();
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits[r * classes..(r + 1) * classes];
        let p = softmax(row);
        // Floors underflow but lets NaN through.
        let pt = if p[t] < T::min_positive_value() { T::min_positive_value() } else { p[t] };
        loss -= pt.ln();
        let d = &mut dlogits[r * classes..(r + 1) * classes];
        for c in 0..classes {
            d[c] = p[c] * inv;
        }
        d[t] -= inv;
    }
    (loss * inv, dlogits)
}
