//! Trajectory embedding models producing retrieval keys and queries.
//!
//! Two variants share one interface: a frozen, trained policy whose final
//! hidden states are averaged over state tokens, and a frozen bidirectional
//! encoder fed through FrozenHopfield projections of one-hot tokens.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use radt_nn::layers::softmax_in_place;
use radt_nn::{Block, BlockConfig, Checkpoint, Dropout, Init, LayerNorm, ParamId, ParamStore};

use crate::envs::NUM_ACTIONS;
use crate::error::{RadtError, Result};
use crate::policy::{tokenize, Layout, PolicyModel, TokenBatch};
use crate::seeds::rng_for;
use crate::traj::Segment;

pub const DEFAULT_BETA: f64 = 10.0;

/// `FH(x) = Eᵀ softmax(β E P x)` with a fixed random projection `P`.
#[derive(Debug, Clone)]
pub struct FrozenHopfield {
    /// `[v, d_lm]`, row-major.
    e: Vec<f64>,
    /// `[d_lm, d_in]`, row-major.
    p: Vec<f64>,
    v: usize,
    d_lm: usize,
    d_in: usize,
    pub beta: f64,
    pub seed: u64,
}

impl FrozenHopfield {
    /// Draws `P` with entries `N(0, d_in / d_lm)` from `seed`.
    pub fn new(e: Vec<f64>, v: usize, d_lm: usize, d_in: usize, beta: f64, seed: u64) -> Result<Self> {
        if v == 0 || d_lm == 0 || d_in == 0 || e.len() != v * d_lm {
            return Err(RadtError::Config(format!(
                "embedding matrix of {} values does not match {v} x {d_lm}",
                e.len()
            )));
        }
        let normal = Normal::new(0.0, (d_in as f64 / d_lm as f64).sqrt()).expect("positive std");
        let mut rng = rng_for(seed, "frozen_hopfield", d_in as u64);
        let p = (0..d_lm * d_in).map(|_| normal.sample(&mut rng)).collect();
        Ok(FrozenHopfield { e, p, v, d_lm, d_in, beta, seed })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_lm(&self) -> usize {
        self.d_lm
    }

    pub fn projection(&self) -> &[f64] {
        &self.p
    }

    /// Softmax weights over the rows of `E` for input `x`.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(RadtError::Invariant(format!("input has dimension {}, expected {}", x.len(), self.d_in)));
        }
        let z: Vec<f64> = (0..self.d_lm)
            .map(|r| self.p[r * self.d_in..(r + 1) * self.d_in].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let mut w: Vec<f64> = (0..self.v)
            .map(|i| self.beta * self.e[i * self.d_lm..(i + 1) * self.d_lm].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        softmax_in_place(&mut w);
        Ok(w)
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.weights(x)?;
        let mut out = vec![0.0; self.d_lm];
        for (i, &wi) in w.iter().enumerate() {
            for (o, &e) in out.iter_mut().zip(&self.e[i * self.d_lm..(i + 1) * self.d_lm]) {
                *o += wi * e;
            }
        }
        Ok(out)
    }

    /// Projections of every one-hot input, `[d_in, d_lm]`.
    pub fn one_hot_table(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.d_in];
        let mut table = Vec::with_capacity(self.d_in * self.d_lm);
        for i in 0..self.d_in {
            x[i] = 1.0;
            table.extend(self.project(&x).expect("matching dimension"));
            x[i] = 0.0;
        }
        table
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { vocab: 512, d_lm: 64, layers: 2, heads: 4, mlp_ratio: 4, max_tokens: 512, seed: 0 }
    }
}

/// A frozen bidirectional transformer encoder over precomputed token vectors.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore<f32>,
    vocab: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl FrozenEncoder {
    fn build<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d_lm.is_multiple_of(cfg.heads) || cfg.vocab == 0 || cfg.max_tokens == 0 {
            return Err(RadtError::Config(format!("invalid encoder config {cfg:?}")));
        }
        let mut ps = ParamStore::new();
        let vocab = ps.add("vocab", &[cfg.vocab, cfg.d_lm], Init::TruncNormal(0.02), false, rng);
        let pos = ps.add("pos", &[cfg.max_tokens, cfg.d_lm], Init::TruncNormal(0.02), false, rng);
        let bcfg = BlockConfig {
            d: cfg.d_lm,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            cross_attention: false,
            causal: false,
        };
        let blocks = (0..cfg.layers).map(|l| Block::new(&mut ps, &format!("layer{l}"), bcfg, rng)).collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", cfg.d_lm, rng);
        ps.freeze();
        Ok(FrozenEncoder { cfg, params: ps, vocab, pos, blocks, ln_f })
    }

    /// The bundled encoder: random weights pinned by `cfg.seed`.
    pub fn random(cfg: EncoderConfig) -> Result<Self> {
        let mut rng: ChaCha8Rng = rng_for(cfg.seed, "frozen_encoder", 0);
        Self::build(cfg, &mut rng)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params, serde_json::to_value(self.cfg).expect("config serializes"), None)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: EncoderConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| RadtError::Config(format!("not an encoder checkpoint: {e}")))?;
        let mut enc = Self::build(cfg, &mut rng_for(0, "checkpoint_skeleton", 0))?;
        ck.load_into(&mut enc.params)?;
        enc.params.freeze();
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Rows of the token embedding matrix `E` in double precision.
    pub fn vocab_matrix(&self) -> Vec<f64> {
        self.params.value(self.vocab).iter().map(|&v| v as f64).collect()
    }

    /// Encodes `[b * t, d_lm]` inputs (positions are added here) and returns
    /// final normalized hidden states.
    pub fn encode(&self, mut x: Vec<f32>, b: usize, t: usize, key_valid: &[bool]) -> Result<Vec<f32>> {
        let d = self.cfg.d_lm;
        if t > self.cfg.max_tokens {
            return Err(RadtError::Invariant(format!("{t} tokens exceed encoder limit {}", self.cfg.max_tokens)));
        }
        let pos = self.params.value(self.pos);
        for (r, row) in x.chunks_mut(d).enumerate() {
            let p = &pos[(r % t) * d..(r % t + 1) * d];
            row.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
        }
        for blk in &self.blocks {
            x = blk.forward(&self.params, x, b, t, key_valid, None, &mut Dropout::off()).0;
        }
        Ok(self.ln_f.forward(&self.params, &x, b * t).0)
    }
}

/// FrozenHopfield adapters for each token modality in front of a frozen encoder.
#[derive(Debug, Clone)]
pub struct DomainAgnostic {
    pub encoder: FrozenEncoder,
    pub layout: Layout,
    pub rtg_scale: f32,
    state: Vec<f32>,
    action: Vec<f32>,
    reward: Vec<f32>,
    rtg: FrozenHopfield,
    /// Projections of integer returns `0..len`.
    rtg_table: Vec<f32>,
}

impl DomainAgnostic {
    pub fn new(
        encoder: FrozenEncoder,
        n_states: usize,
        layout: Layout,
        rtg_scale: f32,
        max_return: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        let (v, d) = (encoder.cfg.vocab, encoder.cfg.d_lm);
        let e = encoder.vocab_matrix();
        let table = |d_in: usize, tag: u64| -> Result<Vec<f32>> {
            let fh = FrozenHopfield::new(e.clone(), v, d, d_in, beta, crate::seeds::split_seed(seed, "fh", tag))?;
            Ok(fh.one_hot_table().into_iter().map(|x| x as f32).collect())
        };
        let state = table(n_states, 0)?;
        let action = table(NUM_ACTIONS, 1)?;
        let reward = table(2, 2)?;
        let rtg = FrozenHopfield::new(e, v, d, 1, beta, crate::seeds::split_seed(seed, "fh", 3))?;
        let mut rtg_table = Vec::with_capacity((max_return + 1) * d);
        for r in 0..=max_return {
            rtg_table.extend(rtg.project(&[r as f64 / rtg_scale as f64])?.into_iter().map(|x| x as f32));
        }
        Ok(DomainAgnostic { encoder, layout, rtg_scale, state, action, reward, rtg, rtg_table })
    }

    fn rtg_vector(&self, r: f32) -> Vec<f32> {
        let d = self.encoder.cfg.d_lm;
        let idx = r as usize;
        if r >= 0.0 && r.fract() == 0.0 && (idx + 1) * d <= self.rtg_table.len() {
            return self.rtg_table[idx * d..(idx + 1) * d].to_vec();
        }
        let x = [r as f64 / self.rtg_scale as f64];
        self.rtg.project(&x).expect("scalar input").into_iter().map(|v| v as f32).collect()
    }

    fn inputs(&self, tb: &TokenBatch) -> Result<Vec<f32>> {
        let d = self.encoder.cfg.d_lm;
        let k = tb.layout.tokens_per_step();
        let n_states = self.state.len() / d;
        let mut x = vec![0.0f32; tb.b * tb.tokens() * d];
        for i in 0..tb.b * tb.steps {
            if !tb.valid[i] {
                continue;
            }
            let s = tb.states[i] as usize;
            if s >= n_states {
                return Err(RadtError::Invariant(format!("state {s} outside {n_states} one-hot inputs")));
            }
            let mut rows: Vec<&[f32]> = Vec::with_capacity(k);
            let rtg;
            if self.layout == Layout::RtgStateActionReward {
                rtg = self.rtg_vector(tb.rtg[i]);
                rows.push(&rtg);
            }
            let a = tb.actions[i] as usize;
            let r = tb.rewards[i] as usize;
            rows.push(&self.state[s * d..(s + 1) * d]);
            rows.push(&self.action[a * d..(a + 1) * d]);
            rows.push(&self.reward[r * d..(r + 1) * d]);
            for (slot, row) in rows.into_iter().enumerate() {
                let o = (i * k + slot) * d;
                x[o..o + d].copy_from_slice(row);
            }
        }
        Ok(x)
    }
}

/// The embedding model `g`, frozen in both variants.
#[derive(Debug, Clone)]
pub enum EmbeddingModel {
    DomainSpecific(Box<PolicyModel<f32>>),
    DomainAgnostic(Box<DomainAgnostic>),
}

impl EmbeddingModel {
    pub fn domain_specific(mut policy: PolicyModel<f32>) -> Self {
        policy.params.freeze();
        EmbeddingModel::DomainSpecific(Box::new(policy))
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingModel::DomainSpecific(p) => p.cfg().d,
            EmbeddingModel::DomainAgnostic(a) => a.encoder.cfg.d_lm,
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            EmbeddingModel::DomainSpecific(p) => p.cfg().layout,
            EmbeddingModel::DomainAgnostic(a) => a.layout,
        }
    }

    pub fn param_digest(&self) -> u64 {
        match self {
            EmbeddingModel::DomainSpecific(p) => p.params.digest(),
            EmbeddingModel::DomainAgnostic(a) => a.encoder.params.digest(),
        }
    }

    /// Embeds each segment: the mean of final hidden states at its state
    /// tokens. Returns `[segments.len(), dim]`.
    pub fn embed_batch(&self, segments: &[&Segment]) -> Result<Vec<f32>> {
        self.run(segments, 0.0, None)
    }

    /// Like [`embed_batch`](Self::embed_batch) with each input token zeroed
    /// independently with probability `rate`.
    pub fn embed_batch_dropped(&self, segments: &[&Segment], rate: f64, rng: &mut dyn RngCore) -> Result<Vec<f32>> {
        self.run(segments, rate, Some(rng))
    }

    fn run(&self, segments: &[&Segment], rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Vec<f32>> {
        if segments.iter().any(|s| s.is_empty()) {
            return Err(RadtError::Empty("cannot embed an empty trajectory".into()));
        }
        if segments.is_empty() {
            return Ok(Vec::new());
        }
        let steps = segments.iter().map(|s| s.len()).max().unwrap_or(0);
        let tb = tokenize(segments, steps, self.layout())?;
        let drop_mask = match rng {
            Some(rng) if rate > 0.0 => Some(query_token_drop(tb.b, tb.tokens(), rate, rng)),
            _ => None,
        };
        let token_drop = drop_mask.as_deref();
        let hidden = match self {
            EmbeddingModel::DomainSpecific(p) => {
                if steps > p.cfg().max_timestep {
                    return Err(RadtError::Invariant(format!("{steps} steps exceed the embedding policy")));
                }
                p.forward(&tb, None, token_drop, &mut Dropout::off()).hidden
            }
            EmbeddingModel::DomainAgnostic(a) => {
                let mut x = a.inputs(&tb)?;
                let d = a.encoder.cfg.d_lm;
                if let Some(td) = token_drop {
                    for (i, _) in td.iter().enumerate().filter(|(_, &z)| z) {
                        x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                a.encoder.encode(x, tb.b, tb.tokens(), &tb.token_valid())?
            }
        };
        Ok(mean_state_hidden(&tb, &hidden, self.dim()))
    }

    pub fn embed(&self, segment: &Segment) -> Result<Vec<f32>> {
        self.embed_batch(&[segment])
    }
}

fn mean_state_hidden(tb: &TokenBatch, hidden: &[f32], d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; tb.b * d];
    for bi in 0..tb.b {
        let o = &mut out[bi * d..(bi + 1) * d];
        let mut count = 0;
        for i in bi * tb.steps..(bi + 1) * tb.steps {
            if tb.valid[i] {
                let r = tb.state_row(i);
                o.iter_mut().zip(&hidden[r * d..(r + 1) * d]).for_each(|(a, &h)| *a += h);
                count += 1;
            }
        }
        o.iter_mut().for_each(|v| *v /= count as f32);
    }
    out
}

/// Per-token input dropout for training queries, `[b * tokens]`.
pub fn query_token_drop<R: Rng + ?Sized>(b: usize, tokens: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    (0..b * tokens).map(|_| rate > 0.0 && rng.gen_bool(rate.min(1.0))).collect()
}
