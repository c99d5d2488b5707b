//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

use radt::memory::{EpisodeRef, IndexEntry, UtilityMode, VectorIndex};
use radt::traj::Segment;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn naive_cos(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Orders `(score, entry index)` pairs: score descending, then return
/// descending, episode id, offset, task id and index ascending.
fn rank(entries: &[IndexEntry], scored: &mut [(f64, usize)]) {
    scored.sort_by(|&(sa, a), &(sb, b)| {
        let (ea, eb) = (&entries[a], &entries[b]);
        sb.partial_cmp(&sa)
            .unwrap()
            .then(eb.episode_return.partial_cmp(&ea.episode_return).unwrap())
            .then(ea.episode_id.cmp(&eb.episode_id))
            .then(ea.offset.cmp(&eb.offset))
            .then(ea.task_id.cmp(&eb.task_id))
            .then(a.cmp(&b))
    });
}

pub fn oracle_topl(index: &VectorIndex, q: &[f32], l: usize, exclude: Option<EpisodeRef>) -> Vec<(usize, f64)> {
    let entries = index.entries();
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(x) = exclude {
            if e.task_id == x.task_id && e.episode_id == x.episode_id {
                continue;
            }
        }
        scored.push((naive_cos(q, &e.key), i));
    }
    rank(entries, &mut scored);
    scored.into_iter().take(l).map(|(s, i)| (i, s)).collect()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|&x| if hi == lo { 0.5 } else { (x - lo) / (hi - lo) }).collect()
}

/// Whole retrieval pipeline scored explicitly: fetch `m`, drop similarities
/// above `cutoff` (when given), keep `l`, reweight, keep `k`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_retrieve(
    index: &VectorIndex,
    q: &[f32],
    m: usize,
    cutoff: Option<f64>,
    l: usize,
    mode: UtilityMode,
    alpha: f64,
    k: usize,
    exclude: Option<EpisodeRef>,
) -> Vec<usize> {
    let entries = index.entries();
    let mut cands = oracle_topl(index, q, m, exclude);
    if let Some(c) = cutoff {
        cands.retain(|&(_, s)| s <= c);
    }
    cands.truncate(l);
    if cands.is_empty() {
        return Vec::new();
    }
    let rel = normalize(&cands.iter().map(|c| c.1).collect::<Vec<_>>());
    let util: Vec<f64> = match mode {
        UtilityMode::Task(t) => cands.iter().map(|c| (entries[c.0].task_id == t) as u8 as f64).collect(),
        UtilityMode::Return => normalize(&cands.iter().map(|c| entries[c.0].episode_return).collect::<Vec<_>>()),
        UtilityMode::Position => normalize(&cands.iter().map(|c| entries[c.0].position as f64).collect::<Vec<_>>()),
    };
    let mut scored: Vec<(f64, usize)> = (0..cands.len()).map(|i| (rel[i] + alpha * util[i], cands[i].0)).collect();
    rank(entries, &mut scored);
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Greedy storage-order dedup with pairwise cosine checks.
pub fn oracle_dedup(entries: &[IndexEntry], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..entries.len() {
        let dup = kept.iter().any(|&j| {
            (entries[j].task_id, entries[j].episode_id) != (entries[i].task_id, entries[i].episode_id)
                && naive_cos(&entries[i].key, &entries[j].key) > threshold
        });
        if !dup {
            kept.push(i);
        }
    }
    kept
}

pub fn one_step() -> Segment {
    let mut s = Segment::default();
    s.push(0, 0, 0, 0.0, 0);
    s
}

/// Random entries with coarse returns and ids so that ties occur, plus a
/// share of exactly duplicated keys.
pub fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize, tasks: usize) -> VectorIndex {
    let mut index = VectorIndex::new(dim);
    let mut keys: Vec<Vec<f32>> = Vec::new();
    for i in 0..n {
        let key: Vec<f32> = if !keys.is_empty() && rng.gen_bool(0.1) {
            keys[rng.gen_range(0..keys.len())].clone()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
        };
        keys.push(key.clone());
        index
            .push(IndexEntry {
                key,
                value: one_step(),
                past_len: 1,
                task_id: rng.gen_range(0..tasks),
                episode_id: rng.gen_range(0..20),
                episode_return: rng.gen_range(0..5) as f64,
                offset: rng.gen_range(0..3) * 50,
                position: i as u64,
            })
            .unwrap();
    }
    index
}
