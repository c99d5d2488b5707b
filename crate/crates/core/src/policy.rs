//! Return-conditioned sequence policies.
//!
//! Each timestep becomes `(R, s, a, r)` tokens (or `(s, a, r)` for the
//! algorithm-distillation layout) with one embedding layer per modality plus
//! a learned absolute position table. The action is read out at the state
//! token. When cross-attention is enabled, every block attends over a
//! retrieved sub-trajectory embedded with its own set of tables.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use radt_nn::layers::{apply_mask, softmax, LnCache};
use radt_nn::{
    cross_entropy, AdamW, Block, BlockCache, BlockConfig, Checkpoint, Context, Dropout, Embedding, LayerNorm,
    Linear, ParamId, ParamStore, Real, RngState, ScalarGraph,
};

use crate::envs::{TaskKind, NUM_ACTIONS};
use crate::error::{RadtError, Result};
use crate::traj::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `(R, s, a, r)` per step.
    RtgStateActionReward,
    /// `(s, a, r)` per step.
    StateActionReward,
}

impl Layout {
    pub fn tokens_per_step(self) -> usize {
        match self {
            Layout::RtgStateActionReward => 4,
            Layout::StateActionReward => 3,
        }
    }

    pub fn state_slot(self) -> usize {
        match self {
            Layout::RtgStateActionReward => 1,
            Layout::StateActionReward => 0,
        }
    }

    fn has_rtg(self) -> bool {
        self == Layout::RtgStateActionReward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub mlp_ratio: usize,
    /// Input context in steps.
    pub context_steps: usize,
    pub cross_attention: bool,
    /// Length of a retrieved value in steps (past plus continuation).
    pub retrieved_steps: usize,
    pub dropout: f64,
    pub n_states: usize,
    /// Size of the absolute position table.
    pub max_timestep: usize,
    /// Returns-to-go are divided by this before the linear embedding.
    pub rtg_scale: f32,
    pub layout: Layout,
}

impl PolicyConfig {
    /// Two layers, four heads, width 64.
    pub fn desk(n_states: usize, episode_len: usize, context_steps: usize, cross_attention: bool) -> Self {
        PolicyConfig {
            layers: 2,
            heads: 4,
            d: 64,
            mlp_ratio: 4,
            context_steps,
            cross_attention,
            retrieved_steps: 2 * context_steps,
            dropout: 0.2,
            n_states,
            max_timestep: episode_len,
            rtg_scale: episode_len as f32,
            layout: Layout::RtgStateActionReward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(RadtError::Config(format!("hidden {} not divisible by heads {}", self.d, self.heads)));
        }
        if self.context_steps == 0 || self.layers == 0 || self.n_states == 0 || self.max_timestep == 0 {
            return Err(RadtError::Config("context, layers, states and positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(RadtError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.cross_attention && self.retrieved_steps == 0 {
            return Err(RadtError::Config("retrieved_steps must be positive with cross-attention".into()));
        }
        Ok(())
    }
}

/// Right-padded batch of step sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub b: usize,
    pub steps: usize,
    pub layout: Layout,
    pub rtg: Vec<f32>,
    pub states: Vec<u32>,
    pub actions: Vec<u8>,
    pub rewards: Vec<u8>,
    pub timesteps: Vec<u32>,
    pub valid: Vec<bool>,
    /// Action target at each step's state token.
    pub targets: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn tokens(&self) -> usize {
        self.steps * self.layout.tokens_per_step()
    }

    /// Validity per token (`[b * tokens]`).
    pub fn token_valid(&self) -> Vec<bool> {
        let k = self.layout.tokens_per_step();
        self.valid.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect()
    }

    /// Row index of the state token of step `i` (flat over the batch).
    pub fn state_row(&self, i: usize) -> usize {
        i * self.layout.tokens_per_step() + self.layout.state_slot()
    }

    /// Token kind names in order, for diagnostics.
    pub fn token_names(layout: Layout) -> &'static [&'static str] {
        match layout {
            Layout::RtgStateActionReward => &["rtg", "state", "action", "reward"],
            Layout::StateActionReward => &["state", "action", "reward"],
        }
    }
}

/// Packs segments into a right-padded batch of `steps` steps.
///
/// Every step carries an action target; callers may clear targets (for
/// instance on context episodes). Padded steps never carry targets.
pub fn tokenize(segments: &[&Segment], steps: usize, layout: Layout) -> Result<TokenBatch> {
    let b = segments.len();
    let n = b * steps;
    let mut tb = TokenBatch {
        b,
        steps,
        layout,
        rtg: vec![0.0; n],
        states: vec![0; n],
        actions: vec![0; n],
        rewards: vec![0; n],
        timesteps: vec![0; n],
        valid: vec![false; n],
        targets: vec![None; n],
    };
    for (bi, seg) in segments.iter().enumerate() {
        if !seg.is_aligned() {
            return Err(RadtError::Invariant("segment fields have different lengths".into()));
        }
        if seg.len() > steps {
            return Err(RadtError::Invariant(format!("segment of {} steps exceeds context {steps}", seg.len())));
        }
        for t in 0..seg.len() {
            let i = bi * steps + t;
            tb.rtg[i] = seg.rtg[t];
            tb.states[i] = seg.states[t];
            tb.actions[i] = seg.actions[t];
            tb.rewards[i] = seg.rewards[t];
            tb.timesteps[i] = seg.timesteps[t];
            tb.valid[i] = true;
            tb.targets[i] = Some(seg.actions[t] as usize);
        }
    }
    Ok(tb)
}

pub fn detokenize(tb: &TokenBatch) -> Vec<Segment> {
    (0..tb.b)
        .map(|bi| {
            let mut seg = Segment::default();
            for i in bi * tb.steps..(bi + 1) * tb.steps {
                if tb.valid[i] {
                    seg.push(tb.states[i], tb.actions[i], tb.rewards[i], tb.rtg[i], tb.timesteps[i]);
                }
            }
            seg
        })
        .collect()
}

/// Retrieved values for a batch; absent rows use the empty-context path.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedContext {
    pub tokens: TokenBatch,
    pub present: Vec<bool>,
}

impl RetrievedContext {
    pub fn new(values: &[Option<&Segment>], steps: usize, layout: Layout) -> Result<Self> {
        let empty = Segment::default();
        let segs: Vec<&Segment> = values.iter().map(|v| v.unwrap_or(&empty)).collect();
        let tokens = tokenize(&segs, steps, layout)?;
        let present = values.iter().map(|v| v.is_some_and(|s| !s.is_empty())).collect();
        Ok(RetrievedContext { tokens, present })
    }
}

#[derive(Debug, Clone)]
struct ModalityEmbedding {
    rtg: Option<Linear>,
    state: Embedding,
    action: Embedding,
    reward: Embedding,
    pos: Embedding,
}

impl ModalityEmbedding {
    fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &PolicyConfig,
        positions: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d;
        ModalityEmbedding {
            rtg: cfg.layout.has_rtg().then(|| Linear::new(ps, &format!("{prefix}.rtg"), 1, d, rng)),
            state: Embedding::new(ps, &format!("{prefix}.state"), cfg.n_states, d, rng),
            action: Embedding::new(ps, &format!("{prefix}.action"), NUM_ACTIONS, d, rng),
            reward: Embedding::new(ps, &format!("{prefix}.reward"), 2, d, rng),
            pos: Embedding::new(ps, &format!("{prefix}.pos"), positions, d, rng),
        }
    }

    /// Position of step `i` in the table: absolute timestep or offset within the row.
    fn position(tb: &TokenBatch, i: usize, local: bool) -> usize {
        if local {
            i % tb.steps
        } else {
            tb.timesteps[i] as usize
        }
    }

    /// Returns token inputs `[b * tokens, d]` and the scaled RTG inputs.
    fn forward<T: Real>(&self, ps: &ParamStore<T>, tb: &TokenBatch, rtg_scale: f32, local: bool) -> (Vec<T>, Vec<T>) {
        let d = self.pos.d;
        let k = tb.layout.tokens_per_step();
        let n = tb.b * tb.steps;
        let mut x = vec![T::zero(); n * k * d];
        let rtg_in: Vec<T> = tb.rtg.iter().map(|&r| T::of((r / rtg_scale) as f64)).collect();
        let rtg_out = self.rtg.as_ref().map(|l| l.forward(ps, &rtg_in, n));
        for i in 0..n {
            if !tb.valid[i] {
                continue;
            }
            let pos = Self::position(tb, i, local);
            let mut slot = 0;
            let row = |slot: usize| (i * k + slot) * d..(i * k + slot + 1) * d;
            if let Some(ro) = &rtg_out {
                let r = row(slot);
                x[r.clone()].copy_from_slice(&ro[i * d..(i + 1) * d]);
                self.pos.add_row(ps, pos, &mut x[r]);
                slot += 1;
            }
            for (table, idx) in [
                (&self.state, tb.states[i] as usize),
                (&self.action, tb.actions[i] as usize),
                (&self.reward, tb.rewards[i] as usize),
            ] {
                let r = row(slot);
                table.add_row(ps, idx, &mut x[r.clone()]);
                self.pos.add_row(ps, pos, &mut x[r]);
                slot += 1;
            }
        }
        (x, rtg_in)
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, tb: &TokenBatch, rtg_in: &[T], dx: &[T], local: bool) {
        let d = self.pos.d;
        let k = tb.layout.tokens_per_step();
        let n = tb.b * tb.steps;
        let mut drtg = vec![T::zero(); n * d];
        let mut dpos = vec![T::zero(); d];
        for i in 0..n {
            if !tb.valid[i] {
                continue;
            }
            let row = |slot: usize| &dx[(i * k + slot) * d..(i * k + slot + 1) * d];
            dpos.iter_mut().for_each(|v| *v = T::zero());
            for slot in 0..k {
                dpos.iter_mut().zip(row(slot)).for_each(|(a, &b)| *a += b);
            }
            self.pos.backward_row(ps, Self::position(tb, i, local), &dpos);
            let mut slot = 0;
            if self.rtg.is_some() {
                drtg[i * d..(i + 1) * d].copy_from_slice(row(0));
                slot = 1;
            }
            self.state.backward_row(ps, tb.states[i] as usize, row(slot));
            self.action.backward_row(ps, tb.actions[i] as usize, row(slot + 1));
            self.reward.backward_row(ps, tb.rewards[i] as usize, row(slot + 2));
        }
        if let Some(l) = &self.rtg {
            l.backward(ps, rtg_in, &drtg, n, false);
        }
    }
}

/// Layer handles of a policy; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    input: ModalityEmbedding,
    retrieved: Option<ModalityEmbedding>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

pub struct PolicyCache<T> {
    rtg_in: Vec<T>,
    emb_mask: Option<Vec<T>>,
    token_drop: Option<Vec<bool>>,
    ctx_x: Option<Vec<T>>,
    ctx_rtg_in: Vec<T>,
    ctx_valid: Vec<bool>,
    blocks: Vec<BlockCache<T>>,
    pre_ln: Vec<T>,
    ln_cache: LnCache<T>,
    gathered: Vec<T>,
}

impl<T> PolicyCache<T> {
    pub fn block(&self, layer: usize) -> &BlockCache<T> {
        &self.blocks[layer]
    }
}

pub struct Forward<T> {
    /// `[b * steps, actions]`.
    pub logits: Vec<T>,
    /// Final normalized hidden states `[b * tokens, d]`.
    pub hidden: Vec<T>,
    pub cache: PolicyCache<T>,
}

impl PolicyNet {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input = ModalityEmbedding::new(ps, "emb", &cfg, cfg.max_timestep, rng);
        let bcfg = BlockConfig {
            d: cfg.d,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            cross_attention: cfg.cross_attention,
            causal: true,
        };
        let blocks = (0..cfg.layers).map(|l| Block::new(ps, &format!("block{l}"), bcfg, rng)).collect();
        let ln_f = LayerNorm::new(ps, "ln_f", cfg.d, rng);
        let head = Linear::new(ps, "head", cfg.d, NUM_ACTIONS, rng);
        let retrieved = cfg
            .cross_attention
            .then(|| ModalityEmbedding::new(ps, "ret", &cfg, cfg.retrieved_steps, rng));
        Ok(PolicyNet { cfg, input, retrieved, blocks, ln_f, head })
    }

    /// `token_drop` zeroes the input embedding of flagged tokens (`[b * tokens]`).
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tb: &TokenBatch,
        ctx: Option<&RetrievedContext>,
        token_drop: Option<&[bool]>,
        drop: &mut Dropout<'_>,
    ) -> Forward<T> {
        assert_eq!(tb.layout, self.cfg.layout, "token layout does not match the model");
        let d = self.cfg.d;
        let (b, tt) = (tb.b, tb.tokens());
        let (mut x, rtg_in) = self.input.forward(ps, tb, self.cfg.rtg_scale, false);
        if let Some(td) = token_drop {
            for (i, &z) in td.iter().enumerate() {
                if z {
                    x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
        let emb_mask = drop.mask::<T>(x.len());
        if let Some(m) = &emb_mask {
            apply_mask(&mut x, m);
        }
        let key_valid = tb.token_valid();

        let (mut ctx_x, mut ctx_rtg_in, mut ctx_valid) = (None, Vec::new(), Vec::new());
        if let (Some(c), Some(emb)) = (ctx, &self.retrieved) {
            if c.present.iter().any(|&p| p) {
                assert_eq!(c.tokens.b, b, "context batch size mismatch");
                let (cx, cr) = emb.forward(ps, &c.tokens, self.cfg.rtg_scale, true);
                ctx_x = Some(cx);
                ctx_rtg_in = cr;
                ctx_valid = c.tokens.token_valid();
            }
        }
        let context = match (&ctx_x, ctx) {
            (Some(data), Some(c)) => Some(Context {
                data,
                len: c.tokens.tokens(),
                key_valid: &ctx_valid,
                present: &c.present,
            }),
            _ => None,
        };

        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, cache) = blk.forward(ps, x, b, tt, &key_valid, context.as_ref(), drop);
            caches.push(cache);
            x = y;
        }
        let (logits, hidden, ln_cache, gathered) = self.readout(ps, tb, &x);
        Forward {
            logits,
            hidden,
            cache: PolicyCache {
                rtg_in,
                emb_mask,
                token_drop: token_drop.map(|t| t.to_vec()),
                ctx_x,
                ctx_rtg_in,
                ctx_valid,
                blocks: caches,
                pre_ln: x,
                ln_cache,
                gathered,
            },
        }
    }

    /// Accumulates parameter gradients for `dlogits`.
    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        tb: &TokenBatch,
        ctx: Option<&RetrievedContext>,
        fwd: &Forward<T>,
        dlogits: &[T],
    ) {
        let d = self.cfg.d;
        let (b, tt) = (tb.b, tb.tokens());
        let n = b * tb.steps;
        let c = &fwd.cache;
        let dg = self.head.backward(ps, &c.gathered, dlogits, n, true);
        let mut dhidden = vec![T::zero(); b * tt * d];
        for i in 0..n {
            let r = tb.state_row(i);
            dhidden[r * d..(r + 1) * d].copy_from_slice(&dg[i * d..(i + 1) * d]);
        }
        let mut dx = self.ln_f.backward(ps, &c.pre_ln, &c.ln_cache, &dhidden, b * tt);

        let context = match (&c.ctx_x, ctx) {
            (Some(data), Some(cx)) => Some(Context {
                data,
                len: cx.tokens.tokens(),
                key_valid: &c.ctx_valid,
                present: &cx.present,
            }),
            _ => None,
        };
        let mut dctx: Option<Vec<T>> = None;
        for (blk, cache) in self.blocks.iter().zip(&c.blocks).rev() {
            let (dxi, dc) = blk.backward(ps, cache, &dx, b, tt, context.as_ref());
            dx = dxi;
            if let Some(dc) = dc {
                match &mut dctx {
                    Some(acc) => acc.iter_mut().zip(&dc).for_each(|(a, &v)| *a += v),
                    None => dctx = Some(dc),
                }
            }
        }
        if let (Some(dc), Some(emb), Some(cx)) = (dctx, &self.retrieved, ctx) {
            emb.backward(ps, &cx.tokens, &c.ctx_rtg_in, &dc, true);
        }
        if let Some(m) = &c.emb_mask {
            apply_mask(&mut dx, m);
        }
        if let Some(td) = &c.token_drop {
            for (i, &z) in td.iter().enumerate() {
                if z {
                    dx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
        self.input.backward(ps, tb, &c.rtg_in, &dx, false);
    }

    /// Logits recomputed from a stage of `base` onward, with dropout off.
    /// Activations before `from` are taken from `base` unchanged.
    pub fn logits_from<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tb: &TokenBatch,
        ctx: Option<&RetrievedContext>,
        base: &Forward<T>,
        from: Resume,
    ) -> Vec<T> {
        let (b, tt) = (tb.b, tb.tokens());
        let c = &base.cache;
        let context = match (&c.ctx_x, ctx) {
            (Some(data), Some(cx)) => Some(Context {
                data,
                len: cx.tokens.tokens(),
                key_valid: &c.ctx_valid,
                present: &cx.present,
            }),
            _ => None,
        };
        let key_valid = tb.token_valid();
        // Context keys and values only change with the embeddings or the
        // cross-attention weights of their own layer.
        let (mut x, first) = match from {
            Resume::Block(l) => (c.blocks[l].input().to_vec(), l),
            Resume::Cross(l) => {
                let x1 = c.blocks[l].post_self_attention();
                (self.blocks[l].forward_from_cross(ps, x1, b, tt, context.as_ref(), None), l + 1)
            }
            Resume::SelfOut(l) => (self.blocks[l].resume_self_out(ps, &c.blocks[l], b, tt, context.as_ref()), l + 1),
            Resume::CrossOut(l) => {
                let present = ctx.map_or(&[][..], |cx| &cx.present[..]);
                (self.blocks[l].resume_cross_out(ps, &c.blocks[l], b, tt, present), l + 1)
            }
            Resume::Mlp(l) => (self.blocks[l].forward_mlp(ps, c.blocks[l].post_attention(), b * tt), l + 1),
            Resume::MlpOut(l) => (self.blocks[l].resume_mlp_out(ps, &c.blocks[l], b * tt), l + 1),
            Resume::Final => (c.pre_ln.clone(), self.blocks.len()),
        };
        for (blk, bc) in self.blocks.iter().zip(&c.blocks).skip(first) {
            x = blk.forward_eval(ps, &x, b, tt, &key_valid, context.as_ref(), bc.cross_kv());
        }
        self.readout(ps, tb, &x).0
    }

    fn readout<T: Real>(&self, ps: &ParamStore<T>, tb: &TokenBatch, x: &[T]) -> (Vec<T>, Vec<T>, LnCache<T>, Vec<T>) {
        let d = self.cfg.d;
        let (hidden, ln_cache) = self.ln_f.forward(ps, x, tb.b * tb.tokens());
        let n = tb.b * tb.steps;
        let mut gathered = vec![T::zero(); n * d];
        for i in 0..n {
            let r = tb.state_row(i);
            gathered[i * d..(i + 1) * d].copy_from_slice(&hidden[r * d..(r + 1) * d]);
        }
        (self.head.forward(ps, &gathered, n), hidden, ln_cache, gathered)
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Mean cross-entropy over targeted steps and its logit gradient.
pub fn action_loss<T: Real>(logits: &[T], tb: &TokenBatch) -> (T, Vec<T>) {
    cross_entropy(logits, NUM_ACTIONS, &tb.targets)
}

/// Where a partial forward pass restarts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resume {
    Block(usize),
    /// Only the self-attention output projection changed.
    SelfOut(usize),
    Cross(usize),
    CrossOut(usize),
    Mlp(usize),
    MlpOut(usize),
    Final,
}

impl PolicyNet {
    /// Earliest stage affected by the parameter `name`; `None` means the
    /// embeddings change and the whole pass must rerun.
    pub fn resume_point(&self, name: &str) -> Option<Resume> {
        if name.starts_with("ln_f.") || name.starts_with("head.") {
            return Some(Resume::Final);
        }
        let rest = name.strip_prefix("block")?;
        let (layer, sub) = rest.split_once('.')?;
        let l: usize = layer.parse().ok()?;
        if sub.starts_with("proj.") {
            Some(Resume::MlpOut(l))
        } else if sub.starts_with("ln2.") || sub.starts_with("fc.") {
            Some(Resume::Mlp(l))
        } else if sub.starts_with("attn.o.") {
            Some(Resume::SelfOut(l))
        } else if sub.starts_with("cross.o.") {
            Some(Resume::CrossOut(l))
        } else if sub.starts_with("cross.") || sub.starts_with("ln_cross.") {
            Some(Resume::Cross(l))
        } else {
            Some(Resume::Block(l))
        }
    }
}

/// The action loss of a fixed batch with dropout off, as a scalar graph for
/// finite-difference gradient checks.
pub struct LossGraph<'a> {
    pub net: &'a PolicyNet,
    pub batch: &'a TokenBatch,
    pub ctx: Option<&'a RetrievedContext>,
    base: Option<Forward<f64>>,
}

impl<'a> LossGraph<'a> {
    pub fn new(net: &'a PolicyNet, batch: &'a TokenBatch, ctx: Option<&'a RetrievedContext>) -> Self {
        LossGraph { net, batch, ctx, base: None }
    }
}

impl ScalarGraph for LossGraph<'_> {
    fn is_deterministic(&self) -> bool {
        true
    }

    fn loss(&mut self, ps: &mut ParamStore<f64>, backward: bool) -> f64 {
        let fwd = self.net.forward(ps, self.batch, self.ctx, None, &mut Dropout::off());
        let (loss, dl) = action_loss(&fwd.logits, self.batch);
        if backward {
            self.net.backward(ps, self.batch, self.ctx, &fwd, &dl);
            self.base = Some(fwd);
        }
        loss
    }

    fn perturbed_loss(&mut self, ps: &mut ParamStore<f64>, changed: ParamId) -> f64 {
        let name = &ps.get(changed).name;
        match (&self.base, self.net.resume_point(name)) {
            (Some(base), Some(from)) => {
                let logits = self.net.logits_from(ps, self.batch, self.ctx, base, from);
                action_loss(&logits, self.batch).0
            }
            _ => self.loss(ps, false),
        }
    }
}

/// A policy network together with its parameters.
#[derive(Debug, Clone)]
pub struct PolicyModel<T> {
    pub net: PolicyNet,
    pub params: ParamStore<T>,
}

impl<T: Real> PolicyModel<T> {
    pub fn new<R: Rng>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = PolicyNet::new(&mut params, cfg, rng)?;
        Ok(PolicyModel { net, params })
    }

    pub fn cfg(&self) -> &PolicyConfig {
        &self.net.cfg
    }

    pub fn forward(
        &self,
        tb: &TokenBatch,
        ctx: Option<&RetrievedContext>,
        token_drop: Option<&[bool]>,
        drop: &mut Dropout<'_>,
    ) -> Forward<T> {
        self.net.forward(&self.params, tb, ctx, token_drop, drop)
    }

    /// Forward, loss and backward; gradients are zeroed first.
    pub fn loss_and_grad(&mut self, tb: &TokenBatch, ctx: Option<&RetrievedContext>, drop: &mut Dropout<'_>) -> f64 {
        self.params.zero_grad();
        let fwd = self.net.forward(&self.params, tb, ctx, None, drop);
        let (loss, dl) = action_loss(&fwd.logits, tb);
        self.net.backward(&mut self.params, tb, ctx, &fwd, &dl);
        loss.as_f64()
    }

    /// One optimizer update after global-norm clipping.
    pub fn apply_update(&mut self, opt: &mut AdamW<T>, clip: f64) -> Result<f64> {
        let norm = radt_nn::clip_global_norm(&mut self.params, clip);
        opt.step(&mut self.params)?;
        Ok(norm)
    }

    pub fn to_checkpoint(&self, rng: Option<RngState>) -> Checkpoint {
        Checkpoint::from_params(&self.params, serde_json::to_value(self.net.cfg).expect("config serializes"), rng)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: PolicyConfig = serde_json::from_value(ck.config.clone())?;
        let mut rng = crate::seeds::rng_for(0, "checkpoint_skeleton", 0);
        let mut model = Self::new(cfg, &mut rng)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Sample,
    Argmax,
}

/// Picks an action from one row of logits. Argmax never touches `rng`.
pub fn select_action<T: Real, R: Rng>(logits: &[T], mode: Decode, temperature: f64, rng: &mut R) -> usize {
    match mode {
        Decode::Argmax => {
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            best
        }
        Decode::Sample => {
            let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature.max(1e-8)).collect();
            let p = softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
        }
    }
}

/// Mean and standard deviation of the initial target return for a grid size.
pub fn target_return_distribution(width: usize, height: usize) -> Option<(f64, f64)> {
    match (width, height) {
        (10, 10) => Some((90.0, 5.0)),
        (20, 20) => Some((370.0, 10.0)),
        (40, 20) => Some((500.0, 10.0)),
        _ => None,
    }
}

/// Draws the initial return-to-go for one evaluation episode.
///
/// Both grid-world families share the per-size defaults; other sizes
/// require an explicit `(mean, std)`.
pub fn sample_target_return<R: Rng>(
    _kind: TaskKind,
    width: usize,
    height: usize,
    explicit: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<f64> {
    let (mean, std) = explicit.or_else(|| target_return_distribution(width, height)).ok_or_else(|| {
        RadtError::Config(format!("no default target return for a {width}x{height} grid; set one explicitly"))
    })?;
    let n = Normal::new(mean, std).map_err(|e| RadtError::Config(e.to_string()))?;
    Ok(n.sample(rng))
}

/// Next conditioning return after observing `reward`, floored at zero.
pub fn decrement_rtg(rtg: f64, reward: f64) -> f64 {
    (rtg - reward).max(0.0)
}

/// Samples `(i, i + k)` from a stream of `n` episodes.
pub fn ad_build_pair<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(RadtError::Config("episode gap K must be at least 1".into()));
    }
    if n < k + 1 {
        return Err(RadtError::Config(format!("stream of {n} episodes too short for K = {k}")));
    }
    let i = rng.gen_range(0..n - k);
    Ok((i, i + k))
}

/// Concatenates a context and a target episode into one sequence. Timesteps
/// run over the concatenation; only target steps carry action targets.
pub fn ad_sequence(context: &Segment, target: &Segment, offset: usize) -> (Segment, usize) {
    let mut seq = context.clone();
    seq.timesteps = (0..context.len() as u32).collect();
    let mut t = target.clone();
    t.timesteps = (offset as u32..(offset + target.len()) as u32).collect();
    seq.append(&t);
    (seq, context.len())
}
