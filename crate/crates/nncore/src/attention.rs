//! Multi-head scaled dot-product attention, usable as causal self-attention
//! or as full cross-attention over a separate context sequence.

use rand::Rng;

use crate::layers::{softmax_in_place, Linear};
use crate::params::ParamStore;
use crate::real::{gemm, Real, View};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy)]
pub struct AttnMask<'a> {
    /// `[batch * keys]`; false marks padding.
    pub key_valid: &'a [bool],
    /// Query `i` may only see keys `j <= i` (requires equal query/key lengths).
    pub causal: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AttnCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention weights `[batch, heads, queries, keys]`.
    pub probs: Vec<T>,
    pub merged: Vec<T>,
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl<T> AttnCache<T> {
    /// Weights of one (batch element, head) as a `[queries * keys]` slice.
    pub fn head_probs(&self, b: usize, h: usize, heads: usize, tq: usize, s: usize) -> &[T] {
        let off = (b * heads + h) * tq * s;
        &self.probs[off..off + tq * s]
    }
}

const QUERY_BLOCK: usize = 32;

/// Query row blocks `(start, end, keys)` where `keys` is the number of
/// leading keys any row of the block can reach. Keys past the last valid one
/// are never computed and keep zero weight.
fn query_blocks(tq: usize, valid: &[bool], causal: bool) -> Vec<(usize, usize, usize)> {
    let s_eff = valid.iter().rposition(|&v| v).map_or(0, |j| j + 1);
    let mut out = Vec::new();
    let mut i0 = 0;
    while i0 < tq {
        let i1 = (i0 + QUERY_BLOCK).min(tq);
        let kn = if causal { i1.min(s_eff) } else { s_eff };
        if kn > 0 {
            out.push((i0, i1, kn));
        }
        i0 = i1;
    }
    out
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "hidden size {d} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        }
    }

    fn head_size(&self) -> usize {
        self.d / self.heads
    }

    /// `xq`: `[b*tq, d]` queries; `xkv`: `[b*s, d]` keys/values source.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        xq: &[T],
        xkv: &[T],
        b: usize,
        tq: usize,
        s: usize,
        mask: AttnMask<'_>,
    ) -> (Vec<T>, AttnCache<T>) {
        assert_eq!(xkv.len(), b * s * self.d, "context shape mismatch");
        let (k, v) = self.project_kv(ps, xkv, b * s);
        self.attend(ps, xq, k, v, b, tq, s, mask)
    }

    /// Key and value projections of `rows` source vectors.
    pub fn project_kv<T: Real>(&self, ps: &ParamStore<T>, xkv: &[T], rows: usize) -> (Vec<T>, Vec<T>) {
        (self.k.forward(ps, xkv, rows), self.v.forward(ps, xkv, rows))
    }

    /// Attention with precomputed keys and values `[b*s, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<T: Real>(
        &self,
        ps: &ParamStore<T>,
        xq: &[T],
        k: Vec<T>,
        v: Vec<T>,
        b: usize,
        tq: usize,
        s: usize,
        mask: AttnMask<'_>,
    ) -> (Vec<T>, AttnCache<T>) {
        let d = self.d;
        let hs = self.head_size();
        let nh = self.heads;
        assert_eq!(xq.len(), b * tq * d, "query shape mismatch");
        assert!(k.len() == b * s * d && v.len() == b * s * d, "key/value shape mismatch");
        assert_eq!(mask.key_valid.len(), b * s, "key mask shape mismatch");
        assert!(!mask.causal || tq == s, "causal attention needs equal lengths");
        let q = self.q.forward(ps, xq, b * tq);
        let scale = T::one() / T::of(hs as f64).sqrt();
        let mut probs = vec![T::zero(); b * nh * tq * s];
        let mut merged = vec![T::zero(); b * tq * d];
        for bi in 0..b {
            let valid = &mask.key_valid[bi * s..(bi + 1) * s];
            for (i0, i1, kn) in query_blocks(tq, valid, mask.causal) {
                for h in 0..nh {
                    let p_off = (bi * nh + h) * tq * s + i0 * s;
                    gemm(
                        i1 - i0,
                        hs,
                        kn,
                        scale,
                        View::rows(&q, (bi * tq + i0) * d + h * hs, d),
                        View::trans(&k, bi * s * d + h * hs, d),
                        T::zero(),
                        &mut probs,
                        p_off,
                        s,
                    );
                    for i in i0..i1 {
                        let r0 = p_off + (i - i0) * s;
                        let row = &mut probs[r0..r0 + kn];
                        for (j, r) in row.iter_mut().enumerate() {
                            if !valid[j] || (mask.causal && j > i) {
                                *r = T::neg_infinity();
                            }
                        }
                        softmax_in_place(row);
                    }
                    gemm(
                        i1 - i0,
                        kn,
                        hs,
                        T::one(),
                        View::rows(&probs, p_off, s),
                        View::rows(&v, bi * s * d + h * hs, d),
                        T::zero(),
                        &mut merged,
                        (bi * tq + i0) * d + h * hs,
                        d,
                    );
                }
            }
        }
        let out = self.o.forward(ps, &merged, b * tq);
        (out, AttnCache { q, k, v, probs, merged, key_valid: mask.key_valid.to_vec(), causal: mask.causal })
    }

    /// Returns `(dxq, dxkv)`. For self-attention the caller sums both.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        xq: &[T],
        xkv: &[T],
        cache: &AttnCache<T>,
        dout: &[T],
        b: usize,
        tq: usize,
        s: usize,
    ) -> (Vec<T>, Vec<T>) {
        let d = self.d;
        let hs = self.head_size();
        let nh = self.heads;
        let scale = T::one() / T::of(hs as f64).sqrt();
        let dmerged = self.o.backward(ps, &cache.merged, dout, b * tq, true);
        let mut dq = vec![T::zero(); b * tq * d];
        let mut dk = vec![T::zero(); b * s * d];
        let mut dv = vec![T::zero(); b * s * d];
        let mut ds = vec![T::zero(); QUERY_BLOCK.min(tq) * s];
        for bi in 0..b {
            let valid = &cache.key_valid[bi * s..(bi + 1) * s];
            for (i0, i1, kn) in query_blocks(tq, valid, cache.causal) {
                let m = i1 - i0;
                for h in 0..nh {
                    let p_off = (bi * nh + h) * tq * s + i0 * s;
                    let qrow = (bi * tq + i0) * d + h * hs;
                    let krow = bi * s * d + h * hs;
                    gemm(m, hs, kn, T::one(), View::rows(&dmerged, qrow, d), View::trans(&cache.v, krow, d), T::zero(), &mut ds, 0, s);
                    for r in 0..m {
                        let pr = &cache.probs[p_off + r * s..p_off + r * s + kn];
                        let dr = &mut ds[r * s..r * s + kn];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (x, &pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot);
                        }
                    }
                    gemm(m, kn, hs, scale, View::rows(&ds, 0, s), View::rows(&cache.k, krow, d), T::one(), &mut dq, qrow, d);
                    gemm(kn, m, hs, scale, View::trans(&ds, 0, s), View::rows(&cache.q, qrow, d), T::one(), &mut dk, krow, d);
                    gemm(kn, m, hs, T::one(), View::trans(&cache.probs, p_off, s), View::rows(&dmerged, qrow, d), T::one(), &mut dv, krow, d);
                }
            }
        }
        let dxq = self.q.backward(ps, xq, &dq, b * tq, true);
        let mut dxkv = self.k.backward(ps, xkv, &dk, b * s, true);
        let dxv = self.v.backward(ps, xkv, &dv, b * s, true);
        for (a, v) in dxkv.iter_mut().zip(dxv) {
            *a += v;
        }
        (dxq, dxkv)
    }
}
