//! External memory of sub-trajectories with exact cosine search.
//!
//! Every stored episode is cut at offsets `0, C, 2C, ...`. The key of offset
//! `o` embeds the steps `[o, o + C)`; the value holds `[o, o + 2C)` clipped to
//! the episode, so it contains the key's own steps plus their continuation.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use radt_nn::real::{gemm, View};

use crate::embed::EmbeddingModel;
use crate::error::{RadtError, Result};
use crate::traj::{Episode, Segment};

pub const INDEX_FORMAT: &str = "radt-idx-1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Sub-trajectory length `C` in steps.
    pub context_steps: usize,
    /// Candidates kept for reweighting.
    pub top_l: usize,
    /// Contexts finally selected.
    pub top_k: usize,
    pub alpha: f64,
    /// Training-time similarity cut-off; `m = 2l` candidates are fetched first.
    pub cutoff: f64,
    pub query_dropout: f64,
    /// Weight of a random stored key mixed into training queries (0 disables).
    pub blend: f64,
    /// Below this many completed steps the query is replaced by a random entry.
    pub min_len: usize,
    /// Environment steps between retrievals at evaluation.
    pub cadence: usize,
    pub dedup: bool,
    pub dedup_threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            context_steps: 50,
            top_l: 50,
            top_k: 1,
            alpha: 1.0,
            cutoff: 0.98,
            query_dropout: 0.2,
            blend: 0.0,
            min_len: 10,
            cadence: 1,
            dedup: true,
            dedup_threshold: 0.98,
        }
    }
}

impl RetrievalConfig {
    pub fn fetch_m(&self) -> usize {
        2 * self.top_l
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        if self.context_steps == 0 || self.cadence == 0 {
            return Err(RadtError::Config("context_steps and cadence must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.top_l {
            return Err(RadtError::Config(format!("need 1 <= k ({}) <= l ({})", self.top_k, self.top_l)));
        }
        if !rate(self.query_dropout) || !rate(self.blend) {
            return Err(RadtError::Config("query_dropout and blend must lie in [0, 1]".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(RadtError::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: Vec<f32>,
    pub value: Segment,
    /// Steps of `value` covered by the key; the rest is the continuation.
    pub past_len: usize,
    pub task_id: usize,
    pub episode_id: u64,
    pub episode_return: f64,
    pub offset: usize,
    /// Position of the source episode in its dataset or evaluation stream.
    pub position: u64,
}

/// Identifies the episode a query comes from, for same-episode exclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeRef {
    pub task_id: usize,
    pub episode_id: u64,
}

impl IndexEntry {
    pub fn episode(&self) -> EpisodeRef {
        EpisodeRef { task_id: self.task_id, episode_id: self.episode_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub idx: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub idx: usize,
    pub relevance: f64,
    pub utility: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityMode {
    /// Same-task indicator (training).
    Task(usize),
    /// Normalized episode return (evaluation).
    Return,
    /// Normalized dataset position of the source episode.
    Position,
}

/// Flat, append-only vector index.
#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    /// Unit-normalized keys in double precision, `[len, dim]`.
    unit: Vec<f64>,
    pub deduplicated: bool,
}

fn normalize(key: &[f32]) -> Vec<f64> {
    let norm = key.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; key.len()]
    } else {
        key.iter().map(|&v| v as f64 / norm).collect()
    }
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    normalize(a).iter().zip(normalize(b)).map(|(x, y)| x * y).sum()
}

/// Deterministic order among equal scores: higher return, then lower
/// episode id, offset, task id and insertion index.
fn tie_break(index: &VectorIndex, a: usize, b: usize) -> Ordering {
    let (ea, eb) = (&index.entries[a], &index.entries[b]);
    eb.episode_return
        .total_cmp(&ea.episode_return)
        .then(ea.episode_id.cmp(&eb.episode_id))
        .then(ea.offset.cmp(&eb.offset))
        .then(ea.task_id.cmp(&eb.task_id))
        .then(a.cmp(&b))
}

/// Offsets `0, C, 2C, ...` of an episode of `len` steps.
pub fn chunk_offsets(len: usize, c: usize) -> impl Iterator<Item = usize> {
    (0..len).step_by(c.max(1))
}

/// Key span and value of the chunk at `offset`.
pub fn chunk(steps: &Segment, offset: usize, c: usize) -> (Segment, Segment) {
    let n = steps.len();
    let past_end = (offset + c).min(n);
    let value_end = (offset + 2 * c).min(n);
    (steps.slice(offset, past_end), steps.slice(offset, value_end))
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex { dim, ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &IndexEntry {
        &self.entries[idx]
    }

    pub fn push(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.key.len() != self.dim {
            return Err(RadtError::Index(format!("key of dimension {} in a {}-dim index", entry.key.len(), self.dim)));
        }
        if entry.past_len == 0 || entry.past_len > entry.value.len() {
            return Err(RadtError::Index("entry value must cover its key span".into()));
        }
        self.unit.extend(normalize(&entry.key));
        self.entries.push(entry);
        Ok(())
    }

    /// Chunks, embeds and stores a complete episode. Returns the number of
    /// entries added.
    pub fn add_episode(&mut self, ep: &Episode, g: &EmbeddingModel, c: usize, position: u64) -> Result<usize> {
        self.add_episodes(&[(ep, position)], g, c)
    }

    pub fn add_episodes(&mut self, eps: &[(&Episode, u64)], g: &EmbeddingModel, c: usize) -> Result<usize> {
        if c == 0 {
            return Err(RadtError::Config("context_steps must be positive".into()));
        }
        let mut pending = Vec::new();
        for &(ep, position) in eps {
            if ep.is_empty() {
                return Err(RadtError::Empty(format!("episode {} has no steps", ep.episode_id)));
            }
            for offset in chunk_offsets(ep.len(), c) {
                let (past, value) = chunk(&ep.steps, offset, c);
                pending.push((ep, position, offset, past, value));
            }
        }
        let added = pending.len();
        for group in pending.chunks(256) {
            let keys: Vec<&Segment> = group.iter().map(|p| &p.3).collect();
            let emb = g.embed_batch(&keys)?;
            for (p, key) in group.iter().zip(emb.chunks(g.dim())) {
                self.push(IndexEntry {
                    key: key.to_vec(),
                    past_len: p.3.len(),
                    value: p.4.clone(),
                    task_id: p.0.task_id,
                    episode_id: p.0.episode_id,
                    episode_return: p.0.total_return as f64,
                    offset: p.2,
                    position: p.1,
                })?;
            }
        }
        Ok(added)
    }

    /// Cosine similarities of `q` to every stored key.
    pub fn similarities(&self, q: &[f32]) -> Vec<f64> {
        let qn = normalize(q);
        self.unit.chunks(self.dim.max(1)).map(|k| k.iter().zip(&qn).map(|(a, b)| a * b).sum()).collect()
    }

    /// Exact top-`l` by cosine similarity, excluding one episode.
    pub fn search_topl(&self, q: &[f32], l: usize, exclude: Option<EpisodeRef>) -> Result<Vec<Candidate>> {
        if q.len() != self.dim {
            return Err(RadtError::Index(format!("query of dimension {} in a {}-dim index", q.len(), self.dim)));
        }
        Ok(self.top_from_sims(&self.similarities(q), l, exclude))
    }

    /// `search_topl` for many queries at once, `queries` being `[n, dim]`.
    pub fn search_batch(&self, queries: &[f32], l: usize, exclude: &[Option<EpisodeRef>]) -> Result<Vec<Vec<Candidate>>> {
        let n = exclude.len();
        if queries.len() != n * self.dim {
            return Err(RadtError::Index("query batch shape mismatch".into()));
        }
        if self.is_empty() || n == 0 {
            return Ok(vec![Vec::new(); n]);
        }
        let qn: Vec<f64> = queries.chunks(self.dim).flat_map(normalize).collect();
        let mut sims = vec![0.0f64; n * self.len()];
        gemm(
            n,
            self.dim,
            self.len(),
            1.0,
            View::rows(&qn, 0, self.dim),
            View::trans(&self.unit, 0, self.dim),
            0.0,
            &mut sims,
            0,
            self.len(),
        );
        Ok(sims.chunks(self.len()).zip(exclude).map(|(s, &ex)| self.top_from_sims(s, l, ex)).collect())
    }

    fn top_from_sims(&self, sims: &[f64], l: usize, exclude: Option<EpisodeRef>) -> Vec<Candidate> {
        let mut cands: Vec<Candidate> = sims
            .iter()
            .enumerate()
            .filter(|&(i, _)| exclude != Some(self.entries[i].episode()))
            .map(|(idx, &sim)| Candidate { idx, sim })
            .collect();
        let cmp = |a: &Candidate, b: &Candidate| b.sim.total_cmp(&a.sim).then_with(|| tie_break(self, a.idx, b.idx));
        if l < cands.len() {
            if l == 0 {
                return Vec::new();
            }
            cands.select_nth_unstable_by(l - 1, cmp);
            cands.truncate(l);
        }
        cands.sort_by(cmp);
        cands
    }

    /// Scores candidates by min-max relevance plus `alpha` times utility and
    /// keeps the best `k`.
    pub fn reweight_select(&self, cands: &[Candidate], mode: UtilityMode, alpha: f64, k: usize) -> Vec<Scored> {
        if cands.is_empty() {
            return Vec::new();
        }
        let rel = min_max(&cands.iter().map(|c| c.sim).collect::<Vec<_>>());
        let util = match mode {
            UtilityMode::Task(t) => {
                cands.iter().map(|c| if self.entries[c.idx].task_id == t { 1.0 } else { 0.0 }).collect()
            }
            UtilityMode::Return => min_max(&cands.iter().map(|c| self.entries[c.idx].episode_return).collect::<Vec<_>>()),
            UtilityMode::Position => {
                min_max(&cands.iter().map(|c| self.entries[c.idx].position as f64).collect::<Vec<_>>())
            }
        };
        let mut scored: Vec<Scored> = cands
            .iter()
            .zip(rel.iter().zip(&util))
            .map(|(c, (&r, &u))| Scored { idx: c.idx, relevance: r, utility: u, score: r + alpha * u })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| tie_break(self, a.idx, b.idx)));
        scored.truncate(k);
        scored
    }

    /// Full retrieval for one query: fetch, optional cut-off, reweight, select.
    pub fn retrieve(
        &self,
        q: &[f32],
        cfg: &RetrievalConfig,
        mode: UtilityMode,
        exclude: Option<EpisodeRef>,
        cutoff: bool,
    ) -> Result<Vec<Scored>> {
        let fetch = if cutoff { cfg.fetch_m() } else { cfg.top_l };
        let mut cands = self.search_topl(q, fetch, exclude)?;
        if cutoff {
            cands = similarity_cutoff(&cands, cfg.cutoff, cfg.top_l);
        }
        Ok(self.reweight_select(&cands, mode, cfg.alpha, cfg.top_k))
    }

    /// Greedy scan in storage order: an entry is dropped when a retained
    /// earlier entry of a different episode has cosine similarity above
    /// `threshold`. Returns the number of dropped entries.
    pub fn deduplicate(&mut self, threshold: f64) -> usize {
        const BLOCK: usize = 256;
        let d = self.dim;
        let n = self.len();
        let mut kept: Vec<usize> = Vec::new();
        let mut kept_unit: Vec<f64> = Vec::new();
        let mut sims = Vec::new();
        for b0 in (0..n).step_by(BLOCK) {
            let b1 = (b0 + BLOCK).min(n);
            let m = b1 - b0;
            let prior = kept.len();
            sims.clear();
            sims.resize(m * prior, 0.0);
            if prior > 0 {
                gemm(
                    m,
                    d,
                    prior,
                    1.0,
                    View::rows(&self.unit, b0 * d, d),
                    View::trans(&kept_unit, 0, d),
                    0.0,
                    &mut sims,
                    0,
                    prior,
                );
            }
            for i in b0..b1 {
                let ep = self.entries[i].episode();
                let row = &sims[(i - b0) * prior..(i - b0 + 1) * prior];
                let mut dup = row.iter().zip(&kept).any(|(&s, &j)| s > threshold && self.entries[j].episode() != ep);
                if !dup {
                    let ui = &self.unit[i * d..(i + 1) * d];
                    dup = kept[prior..].iter().any(|&j| {
                        self.entries[j].episode() != ep
                            && self.unit[j * d..(j + 1) * d].iter().zip(ui).map(|(a, b)| a * b).sum::<f64>() > threshold
                    });
                }
                if !dup {
                    kept.push(i);
                    kept_unit.extend_from_slice(&self.unit[i * d..(i + 1) * d]);
                }
            }
        }
        let dropped = n - kept.len();
        let mut keep = vec![false; n];
        kept.iter().for_each(|&i| keep[i] = true);
        let mut i = 0;
        self.entries.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        self.unit = kept_unit;
        self.deduplicated = true;
        dropped
    }

    /// A uniformly random entry, optionally restricted to one task.
    pub fn random_entry<R: Rng>(&self, task: Option<usize>, rng: &mut R) -> Option<usize> {
        match task {
            None if self.is_empty() => None,
            None => Some(rng.gen_range(0..self.len())),
            Some(t) => {
                let pool: Vec<usize> = (0..self.len()).filter(|&i| self.entries[i].task_id == t).collect();
                (!pool.is_empty()).then(|| pool[rng.gen_range(0..pool.len())])
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let records: Vec<SnapshotEntry> = self
            .entries
            .iter()
            .map(|e| SnapshotEntry {
                value: e.value.clone(),
                past_len: e.past_len,
                task_id: e.task_id,
                episode_id: e.episode_id,
                episode_return: e.episode_return,
                offset: e.offset,
                position: e.position,
            })
            .collect();
        let manifest = Snapshot {
            format: INDEX_FORMAT.to_string(),
            dim: self.dim,
            deduplicated: self.deduplicated,
            entries: records,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec(&manifest)?)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("keys.f32"))?);
        for e in &self.entries {
            for v in &e.key {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Snapshot = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != INDEX_FORMAT {
            return Err(RadtError::Index(format!("unsupported index format `{}`", manifest.format)));
        }
        let raw = fs::read(dir.join("keys.f32"))?;
        if raw.len() != manifest.entries.len() * manifest.dim * 4 {
            return Err(RadtError::Index(format!(
                "key file holds {} bytes, expected {}",
                raw.len(),
                manifest.entries.len() * manifest.dim * 4
            )));
        }
        let mut index = VectorIndex::new(manifest.dim);
        let mut keys = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for e in manifest.entries {
            index.push(IndexEntry {
                key: keys.by_ref().take(manifest.dim).collect(),
                value: e.value,
                past_len: e.past_len,
                task_id: e.task_id,
                episode_id: e.episode_id,
                episode_return: e.episode_return,
                offset: e.offset,
                position: e.position,
            })?;
        }
        index.deduplicated = manifest.deduplicated;
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    value: Segment,
    past_len: usize,
    task_id: usize,
    episode_id: u64,
    episode_return: f64,
    offset: usize,
    position: u64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    dim: usize,
    deduplicated: bool,
    entries: Vec<SnapshotEntry>,
}

/// Builds an index over episodes in order, using each episode's rank as its position.
pub fn build_index(episodes: &[Episode], g: &EmbeddingModel, c: usize) -> Result<VectorIndex> {
    if episodes.is_empty() {
        return Err(RadtError::Empty("no episodes to index".into()));
    }
    let mut index = VectorIndex::new(g.dim());
    let eps: Vec<(&Episode, u64)> = episodes.iter().zip(0u64..).collect();
    index.add_episodes(&eps, g, c)?;
    Ok(index)
}

/// Drops candidates with similarity above `threshold`, then keeps `l`.
pub fn similarity_cutoff(cands: &[Candidate], threshold: f64, l: usize) -> Vec<Candidate> {
    cands.iter().filter(|c| c.sim <= threshold).take(l).copied().collect()
}

/// Min-max normalization to `[0, 1]`; all-equal inputs map to 0.5.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; v.len()]
    }
}

/// Training query blending: `(1 - blend) q + blend k` with `k` a uniformly
/// drawn stored key. Returns `q` unchanged when blending is off or the index
/// is empty.
pub fn regularize_query<R: Rng>(q: &[f32], blend: f64, index: &VectorIndex, rng: &mut R) -> Vec<f32> {
    if blend <= 0.0 || index.is_empty() {
        return q.to_vec();
    }
    let k = &index.entries[rng.gen_range(0..index.len())].key;
    if blend >= 1.0 {
        return k.clone();
    }
    q.iter().zip(k).map(|(&a, &b)| ((1.0 - blend) * a as f64 + blend * b as f64) as f32).collect()
}
