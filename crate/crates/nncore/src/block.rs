//! Pre-norm transformer block: self-attention, optional cross-attention over a
//! retrieved context, then a GELU MLP. Each sub-layer is residual.

use rand::{Rng, RngCore};

use crate::attention::{AttnCache, AttnMask, MultiHeadAttention};
use crate::layers::{apply_mask, dropout_mask, gelu, gelu_backward, LayerNorm, Linear, LnCache};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cross_attention: bool,
    pub causal: bool,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_cross: Option<LayerNorm>,
    pub cross: Option<MultiHeadAttention>,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
    pub causal: bool,
    pub d: usize,
}

/// Encoded context sequence shared by every cross-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a, T> {
    /// `[batch * len, d]`.
    pub data: &'a [T],
    pub len: usize,
    /// `[batch * len]`.
    pub key_valid: &'a [bool],
    /// `[batch]`; absent elements skip cross-attention entirely (identity).
    pub present: &'a [bool],
}

/// Dropout settings for one forward pass; `None` rng or `p == 0` disables it.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn active(&self) -> bool {
        self.p > 0.0 && self.rng.is_some()
    }

    pub fn mask<T: Real>(&mut self, n: usize) -> Option<Vec<T>> {
        let p = self.p;
        match (&mut self.rng, p > 0.0) {
            (Some(rng), true) => Some(dropout_mask(n, p, rng)),
            _ => None,
        }
    }

    pub fn rng(&mut self) -> Option<&mut (dyn RngCore + 'a)> {
        self.rng.as_deref_mut()
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    x: Vec<T>,
    ln1: Vec<T>,
    ln1c: LnCache<T>,
    sa: AttnCache<T>,
    m1: Option<Vec<T>>,
    x1: Vec<T>,
    lnc: Vec<T>,
    lncc: LnCache<T>,
    ca: Option<AttnCache<T>>,
    m2: Option<Vec<T>>,
    x2: Vec<T>,
    ln2: Vec<T>,
    ln2c: LnCache<T>,
    h: Vec<T>,
    g: Vec<T>,
    m3: Option<Vec<T>>,
}

impl<T> BlockCache<T> {
    /// Block input.
    pub fn input(&self) -> &[T] {
        &self.x
    }

    /// Residual stream after self-attention.
    pub fn post_self_attention(&self) -> &[T] {
        &self.x1
    }

    /// Residual stream after the attention sub-layers, entering the MLP.
    pub fn post_attention(&self) -> &[T] {
        &self.x2
    }

    /// Projected context keys and values, when cross-attention ran.
    pub fn cross_kv(&self) -> Option<(&[T], &[T])> {
        self.ca.as_ref().map(|c| (&c.k[..], &c.v[..]))
    }

    pub fn self_attention(&self) -> &AttnCache<T> {
        &self.sa
    }

    /// Cross-attention weights, when the layer ran with any context present.
    pub fn cross_attention(&self) -> Option<&AttnCache<T>> {
        self.ca.as_ref()
    }
}

impl Block {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let ln1 = LayerNorm::new(ps, &format!("{name}.ln1"), d, rng);
        let attn = MultiHeadAttention::new(ps, &format!("{name}.attn"), d, cfg.heads, rng);
        let (ln_cross, cross) = if cfg.cross_attention {
            (
                Some(LayerNorm::new(ps, &format!("{name}.ln_cross"), d, rng)),
                Some(MultiHeadAttention::new(ps, &format!("{name}.cross"), d, cfg.heads, rng)),
            )
        } else {
            (None, None)
        };
        let ln2 = LayerNorm::new(ps, &format!("{name}.ln2"), d, rng);
        let fc = Linear::new(ps, &format!("{name}.fc"), d, d * cfg.mlp_ratio, rng);
        let proj = Linear::new(ps, &format!("{name}.proj"), d * cfg.mlp_ratio, d, rng);
        Block { ln1, attn, ln_cross, cross, ln2, fc, proj, causal: cfg.causal, d }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: Vec<T>,
        b: usize,
        t: usize,
        key_valid: &[bool],
        ctx: Option<&Context<'_, T>>,
        drop: &mut Dropout<'_>,
    ) -> (Vec<T>, BlockCache<T>) {
        let d = self.d;
        let n = b * t;
        assert_eq!(x.len(), n * d, "block input shape mismatch");

        let (ln1, ln1c) = self.ln1.forward(ps, &x, n);
        let (mut sa_out, sa) =
            self.attn.forward(ps, &ln1, &ln1, b, t, t, AttnMask { key_valid, causal: self.causal });
        let m1 = drop.mask::<T>(sa_out.len());
        if let Some(m) = &m1 {
            apply_mask(&mut sa_out, m);
        }
        let mut x1 = x.clone();
        x1.iter_mut().zip(&sa_out).for_each(|(a, &v)| *a += v);

        let mut x2 = x1.clone();
        let (mut lnc, mut lncc, mut ca, mut m2) = (Vec::new(), LnCache::default(), None, None);
        if let (Some(ln_cross), Some(cross), Some(c)) = (&self.ln_cross, &self.cross, ctx) {
            if c.present.iter().any(|&p| p) {
                let (l, lc) = ln_cross.forward(ps, &x1, n);
                let (mut ca_out, cache) =
                    cross.forward(ps, &l, c.data, b, t, c.len, AttnMask { key_valid: c.key_valid, causal: false });
                m2 = drop.mask::<T>(ca_out.len());
                if let Some(m) = &m2 {
                    apply_mask(&mut ca_out, m);
                }
                for bi in 0..b {
                    if c.present[bi] {
                        let r = bi * t * d..(bi + 1) * t * d;
                        x2[r.clone()].iter_mut().zip(&ca_out[r]).for_each(|(a, &v)| *a += v);
                    }
                }
                lnc = l;
                lncc = lc;
                ca = Some(cache);
            }
        }

        let (ln2, ln2c) = self.ln2.forward(ps, &x2, n);
        let h = self.fc.forward(ps, &ln2, n);
        let g = gelu(&h);
        let mut mlp = self.proj.forward(ps, &g, n);
        let m3 = drop.mask::<T>(mlp.len());
        if let Some(m) = &m3 {
            apply_mask(&mut mlp, m);
        }
        let mut y = x2.clone();
        y.iter_mut().zip(&mlp).for_each(|(a, &v)| *a += v);

        let cache = BlockCache { x, ln1, ln1c, sa, m1, x1, lnc, lncc, ca, m2, x2, ln2, ln2c, h, g, m3 };
        (y, cache)
    }

    /// Whole block with dropout off and no cache. `cross_kv` supplies
    /// already projected context keys and values.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_eval<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &[T],
        b: usize,
        t: usize,
        key_valid: &[bool],
        ctx: Option<&Context<'_, T>>,
        cross_kv: Option<(&[T], &[T])>,
    ) -> Vec<T> {
        let n = b * t;
        let (ln1, _) = self.ln1.forward(ps, x, n);
        let (sa_out, _) = self.attn.forward(ps, &ln1, &ln1, b, t, t, AttnMask { key_valid, causal: self.causal });
        let mut x1 = x.to_vec();
        x1.iter_mut().zip(&sa_out).for_each(|(a, &v)| *a += v);
        self.forward_from_cross(ps, &x1, b, t, ctx, cross_kv)
    }

    /// Cross-attention and MLP sub-layers with dropout off, from the residual
    /// stream after self-attention.
    pub fn forward_from_cross<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x1: &[T],
        b: usize,
        t: usize,
        ctx: Option<&Context<'_, T>>,
        cross_kv: Option<(&[T], &[T])>,
    ) -> Vec<T> {
        let d = self.d;
        let n = b * t;
        let mut x2 = x1.to_vec();
        if let (Some(ln_cross), Some(cross), Some(c)) = (&self.ln_cross, &self.cross, ctx) {
            if c.present.iter().any(|&p| p) {
                let (l, _) = ln_cross.forward(ps, x1, n);
                let (k, v) = match cross_kv {
                    Some((k, v)) => (k.to_vec(), v.to_vec()),
                    None => cross.project_kv(ps, c.data, b * c.len),
                };
                let mask = AttnMask { key_valid: c.key_valid, causal: false };
                let (ca_out, _) = cross.attend(ps, &l, k, v, b, t, c.len, mask);
                for bi in (0..b).filter(|&bi| c.present[bi]) {
                    let r = bi * t * d..(bi + 1) * t * d;
                    x2[r.clone()].iter_mut().zip(&ca_out[r]).for_each(|(a, &v)| *a += v);
                }
            }
        }
        self.forward_mlp(ps, &x2, n)
    }

    /// Self-attention output projection onward, reusing the cached attention
    /// mix. The cache must come from a pass with dropout off.
    pub fn resume_self_out<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlockCache<T>,
        b: usize,
        t: usize,
        ctx: Option<&Context<'_, T>>,
    ) -> Vec<T> {
        let mut x1 = self.attn.o.forward(ps, &cache.sa.merged, b * t);
        x1.iter_mut().zip(&cache.x).for_each(|(a, &v)| *a += v);
        self.forward_from_cross(ps, &x1, b, t, ctx, cache.cross_kv())
    }

    /// Cross-attention output projection onward, reusing the cached mix.
    pub fn resume_cross_out<T: Real>(&self, ps: &ParamStore<T>, cache: &BlockCache<T>, b: usize, t: usize, present: &[bool]) -> Vec<T> {
        let d = self.d;
        let mut x2 = cache.x1.clone();
        if let (Some(cross), Some(ca)) = (&self.cross, &cache.ca) {
            let out = cross.o.forward(ps, &ca.merged, b * t);
            for bi in (0..b).filter(|&bi| present[bi]) {
                let r = bi * t * d..(bi + 1) * t * d;
                x2[r.clone()].iter_mut().zip(&out[r]).for_each(|(a, &v)| *a += v);
            }
        }
        self.forward_mlp(ps, &x2, b * t)
    }

    /// MLP output projection onward, reusing the cached activation.
    pub fn resume_mlp_out<T: Real>(&self, ps: &ParamStore<T>, cache: &BlockCache<T>, n: usize) -> Vec<T> {
        let mut y = self.proj.forward(ps, &cache.g, n);
        y.iter_mut().zip(&cache.x2).for_each(|(a, &v)| *a += v);
        y
    }

    /// The MLP sub-layer alone with dropout off: `x2 + MLP(ln2(x2))`.
    pub fn forward_mlp<T: Real>(&self, ps: &ParamStore<T>, x2: &[T], n: usize) -> Vec<T> {
        let (ln2, _) = self.ln2.forward(ps, x2, n);
        let g = gelu(&self.fc.forward(ps, &ln2, n));
        let mut y = self.proj.forward(ps, &g, n);
        y.iter_mut().zip(x2).for_each(|(a, &v)| *a += v);
        y
    }

    /// Returns `dx` and, when cross-attention ran, the gradient w.r.t. the context data.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &[T],
        b: usize,
        t: usize,
        ctx: Option<&Context<'_, T>>,
    ) -> (Vec<T>, Option<Vec<T>>) {
        let d = self.d;
        let n = b * t;
        // MLP branch
        let mut dmlp = dy.to_vec();
        if let Some(m) = &cache.m3 {
            apply_mask(&mut dmlp, m);
        }
        let dg = self.proj.backward(ps, &cache.g, &dmlp, n, true);
        let dh = gelu_backward(&cache.h, &dg);
        let dln2 = self.fc.backward(ps, &cache.ln2, &dh, n, true);
        let mut dx2 = self.ln2.backward(ps, &cache.x2, &cache.ln2c, &dln2, n);
        dx2.iter_mut().zip(dy).for_each(|(a, &v)| *a += v);

        // cross-attention branch
        let mut dx1 = dx2.clone();
        let mut dctx = None;
        if let (Some(ca), Some(ln_cross), Some(cross), Some(c)) = (&cache.ca, &self.ln_cross, &self.cross, ctx) {
            let mut dca = dx2.clone();
            for bi in 0..b {
                if !c.present[bi] {
                    dca[bi * t * d..(bi + 1) * t * d].iter_mut().for_each(|v| *v = T::zero());
                }
            }
            if let Some(m) = &cache.m2 {
                apply_mask(&mut dca, m);
            }
            let (dl, dc) = cross.backward(ps, &cache.lnc, c.data, ca, &dca, b, t, c.len);
            let dxc = ln_cross.backward(ps, &cache.x1, &cache.lncc, &dl, n);
            dx1.iter_mut().zip(&dxc).for_each(|(a, &v)| *a += v);
            dctx = Some(dc);
        }

        // self-attention branch
        let mut dsa = dx1.clone();
        if let Some(m) = &cache.m1 {
            apply_mask(&mut dsa, m);
        }
        let (dq, dkv) = self.attn.backward(ps, &cache.ln1, &cache.ln1, &cache.sa, &dsa, b, t, t);
        let dl1: Vec<T> = dq.iter().zip(&dkv).map(|(&a, &b)| a + b).collect();
        let dxl = self.ln1.backward(ps, &cache.x, &cache.ln1c, &dl1, n);
        let mut dx = dx1;
        dx.iter_mut().zip(&dxl).for_each(|(a, &v)| *a += v);
        (dx, dctx)
    }
}
