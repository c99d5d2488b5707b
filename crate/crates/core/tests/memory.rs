mod common;

use common::{naive_cos, one_step, oracle_dedup, oracle_retrieve, oracle_topl, random_index};
use proptest::prelude::*;
use radt::embed::EmbeddingModel;
use radt::memory::{
    build_index, min_max, regularize_query, similarity_cutoff, Candidate, EpisodeRef, IndexEntry, RetrievalConfig,
    UtilityMode, VectorIndex,
};
use radt::policy::{PolicyConfig, PolicyModel};
use radt::traj::{Episode, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_embedder() -> EmbeddingModel {
    let cfg = PolicyConfig { layers: 1, heads: 2, d: 8, dropout: 0.0, ..PolicyConfig::desk(9, 100, 50, false) };
    EmbeddingModel::domain_specific(PolicyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
}

fn episode(rng: &mut ChaCha8Rng, task_id: usize, episode_id: u64, len: usize) -> Episode {
    let mut steps = Segment::default();
    let rewards: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
    let mut rtg: u32 = rewards.iter().map(|&r| r as u32).sum();
    for (t, &r) in rewards.iter().enumerate() {
        steps.push(rng.gen_range(0..9), rng.gen_range(0..5), r, rtg as f32, t as u32);
        rtg -= r as u32;
    }
    let total_return = rewards.iter().map(|&r| r as u64).sum();
    Episode { task_id, episode_id, steps, total_return }
}

fn entry(key: Vec<f32>, task_id: usize, episode_id: u64, ret: f64, offset: usize) -> IndexEntry {
    IndexEntry { key, value: one_step(), past_len: 1, task_id, episode_id, episode_return: ret, offset, position: 0 }
}

#[test]
fn chunking_counts() {
    let g = tiny_embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let index = build_index(&[episode(&mut rng, 0, 0, 100)], &g, 50).unwrap();
    assert_eq!(index.len(), 2);
    assert_eq!(index.entry(0).value.len(), 100);
    assert_eq!(index.entry(0).past_len, 50);
    assert_eq!(index.entry(1).value.len(), 50);
    assert_eq!(index.entry(1).offset, 50);

    let short = build_index(&[episode(&mut rng, 0, 0, 30)], &g, 50).unwrap();
    assert_eq!(short.len(), 1);
    assert_eq!(short.entry(0).value.len(), 30);
    assert_eq!(short.entry(0).past_len, 30);
    assert!(build_index(&[], &g, 50).is_err());
}

#[test]
fn entry_count_over_many_episodes() {
    let g = tiny_embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut eps = Vec::new();
    for task in 0..80 {
        for id in 0..200 {
            let len = rng.gen_range(1..=12);
            eps.push(episode(&mut rng, task, id, len));
        }
    }
    let c = 5;
    let expected: usize = eps.iter().map(|e| e.len().div_ceil(c)).sum();
    let index = build_index(&eps, &g, c).unwrap();
    assert_eq!(index.len(), expected);
}

#[test]
fn add_episode_records_returns_and_excludes_itself() {
    let g = tiny_embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut index = build_index(&[episode(&mut rng, 0, 0, 100)], &g, 50).unwrap();
    let ep = episode(&mut rng, 0, 1, 100);
    assert_eq!(index.add_episode(&ep, &g, 50, 1).unwrap(), 2);
    assert_eq!(index.len(), 4);
    for e in &index.entries()[2..] {
        assert_eq!(e.episode_return, ep.total_return as f64);
        assert_eq!(e.episode_id, 1);
    }
    let q = index.entry(2).key.clone();
    let own = EpisodeRef { task_id: 0, episode_id: 1 };
    let hits = index.search_topl(&q, 10, Some(own)).unwrap();
    assert_eq!(hits.len(), 2);
    assert!(hits.iter().all(|c| index.entry(c.idx).episode_id == 0));
}

#[test]
fn stored_key_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let index = random_index(&mut rng, 300, 16, 4);
    let target = 137;
    let q = index.entry(target).key.clone();
    let hits = index.search_topl(&q, 5, None).unwrap();
    assert!((hits[0].sim - 1.0).abs() < 1e-12);
    assert_eq!(naive_cos(&q, &index.entry(hits[0].idx).key), naive_cos(&q, &q));
}

#[test]
fn single_episode_index_excluded_is_empty() {
    let mut index = VectorIndex::new(2);
    for o in 0..3 {
        index.push(entry(vec![1.0, o as f32], 0, 7, 1.0, o * 50)).unwrap();
    }
    let hits = index.search_topl(&[1.0, 0.0], 5, Some(EpisodeRef { task_id: 0, episode_id: 7 })).unwrap();
    assert!(hits.is_empty());
    assert!(VectorIndex::new(2).search_topl(&[1.0, 0.0], 5, None).unwrap().is_empty());
    assert!(index.search_topl(&[1.0], 5, None).is_err());
}

#[test]
fn search_matches_oracle_including_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let index = random_index(&mut rng, 200 + 50 * trial, 16, 3);
        for _ in 0..5 {
            let q: Vec<f32> = if rng.gen_bool(0.5) {
                index.entry(rng.gen_range(0..index.len())).key.clone()
            } else {
                (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let ex = rng.gen_bool(0.5).then(|| EpisodeRef { task_id: rng.gen_range(0..3), episode_id: rng.gen_range(0..20) });
            let got: Vec<usize> = index.search_topl(&q, 50, ex).unwrap().iter().map(|c| c.idx).collect();
            let want: Vec<usize> = oracle_topl(&index, &q, 50, ex).iter().map(|c| c.0).collect();
            assert_eq!(got, want);
            let batch = index.search_batch(&q, 50, &[ex]).unwrap();
            assert_eq!(batch[0].iter().map(|c| c.idx).collect::<Vec<_>>(), want);
        }
    }
}

#[test]
fn task_utility_arithmetic() {
    let mut index = VectorIndex::new(2);
    index.push(entry(vec![1.0, 0.0], 1, 0, 0.0, 0)).unwrap();
    index.push(entry(vec![1.0, 0.0], 0, 1, 0.0, 0)).unwrap();
    index.push(entry(vec![1.0, 0.0], 1, 2, 0.0, 0)).unwrap();
    index.push(entry(vec![1.0, 0.0], 1, 3, 0.0, 0)).unwrap();
    let cands = [
        Candidate { idx: 0, sim: 1.0 },
        Candidate { idx: 2, sim: 0.9 },
        Candidate { idx: 1, sim: 0.2 },
        Candidate { idx: 3, sim: 0.0 },
    ];
    let out = index.reweight_select(&cands, UtilityMode::Task(0), 1.0, 4);
    assert_eq!(out[0].idx, 1);
    assert!((out[0].score - 1.2).abs() < 1e-12);
    assert_eq!(out.iter().map(|s| s.idx).collect::<Vec<_>>(), vec![1, 0, 2, 3]);
    let plain = index.reweight_select(&cands, UtilityMode::Task(0), 0.0, 4);
    assert_eq!(plain.iter().map(|s| s.idx).collect::<Vec<_>>(), vec![0, 2, 1, 3]);
}

#[test]
fn single_candidate_normalizes_to_half() {
    assert_eq!(min_max(&[3.0]), vec![0.5]);
    assert_eq!(min_max(&[2.0, 2.0]), vec![0.5, 0.5]);
    assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
}

#[test]
fn retrieval_pipeline_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = RetrievalConfig { top_l: 50, top_k: 5, ..Default::default() };
    for _ in 0..30 {
        let index = random_index(&mut rng, 400, 16, 4);
        let q: Vec<f32> = index.entry(rng.gen_range(0..index.len())).key.clone();
        for (mode, cutoff) in [(UtilityMode::Task(1), true), (UtilityMode::Return, false), (UtilityMode::Position, false)] {
            let alpha = [0.0, 0.5, 1.0, 2.0][rng.gen_range(0..4)];
            let cfg = RetrievalConfig { alpha, ..cfg };
            let got: Vec<usize> = index.retrieve(&q, &cfg, mode, None, cutoff).unwrap().iter().map(|s| s.idx).collect();
            let m = if cutoff { 100 } else { 50 };
            let want = oracle_retrieve(&index, &q, m, cutoff.then_some(0.98), 50, mode, alpha, 5, None);
            assert_eq!(got, want);
        }
    }
}

#[test]
fn cutoff_examples() {
    let cands: Vec<Candidate> = [0.97, 0.9, 0.5].iter().enumerate().map(|(idx, &sim)| Candidate { idx, sim }).collect();
    assert_eq!(similarity_cutoff(&cands, 0.98, 3), cands);
    let dup: Vec<Candidate> = [1.0, 0.97, 0.9].iter().enumerate().map(|(idx, &sim)| Candidate { idx, sim }).collect();
    assert_eq!(similarity_cutoff(&dup, 0.98, 3), dup[1..].to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let mut sims: Vec<f64> = (0..40).map(|_| rng.gen_range(0.9..1.0)).collect();
        sims.sort_by(|a, b| b.total_cmp(a));
        let cands: Vec<Candidate> = sims.iter().enumerate().map(|(idx, &sim)| Candidate { idx, sim }).collect();
        let want: Vec<Candidate> = cands.iter().filter(|c| c.sim <= 0.98).take(10).copied().collect();
        assert_eq!(similarity_cutoff(&cands, 0.98, 10), want);
    }
}

#[test]
fn dedup_examples() {
    let mut index = VectorIndex::new(2);
    index.push(entry(vec![1.0, 0.0], 0, 0, 0.0, 0)).unwrap();
    index.push(entry(vec![2.0, 0.0], 0, 1, 0.0, 0)).unwrap();
    assert_eq!(index.deduplicate(0.98), 1);
    assert_eq!(index.len(), 1);
    assert_eq!(index.entry(0).episode_id, 0);

    let mut same = VectorIndex::new(2);
    same.push(entry(vec![1.0, 0.0], 0, 0, 0.0, 0)).unwrap();
    same.push(entry(vec![1.0, 0.0], 0, 0, 0.0, 50)).unwrap();
    assert_eq!(same.deduplicate(0.98), 0);
    assert_eq!(same.len(), 2);
}

#[test]
fn dedup_matches_oracle_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [10, 300, 700] {
        let mut index = random_index(&mut rng, n, 8, 2);
        let want = oracle_dedup(index.entries(), 0.98);
        let expected: Vec<IndexEntry> = want.iter().map(|&i| index.entry(i).clone()).collect();
        index.deduplicate(0.98);
        assert_eq!(index.entries(), &expected[..]);
        let again = index.clone();
        assert_eq!(index.deduplicate(0.98), 0);
        assert_eq!(index.entries(), again.entries());
        let e = index.entries();
        for i in 0..e.len() {
            for j in 0..i {
                if e[i].episode() != e[j].episode() {
                    assert!(naive_cos(&e[i].key, &e[j].key) <= 0.98);
                }
            }
        }
    }
}

#[test]
fn query_blending_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let index = random_index(&mut rng, 20, 4, 1);
    let q = vec![0.3, -0.2, 0.1, 0.9];
    assert_eq!(regularize_query(&q, 0.0, &index, &mut rng), q);
    let k = regularize_query(&q, 1.0, &index, &mut rng);
    assert!(index.entries().iter().any(|e| e.key == k));
    let mid = regularize_query(&q, 0.5, &index, &mut rng);
    assert_ne!(mid, q);
    assert_eq!(regularize_query(&q, 0.5, &VectorIndex::new(4), &mut rng), q);
}

#[test]
fn random_entries_respect_task_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let index = random_index(&mut rng, 200, 4, 5);
    for _ in 0..100 {
        let i = index.random_entry(Some(3), &mut rng).unwrap();
        assert_eq!(index.entry(i).task_id, 3);
    }
    assert!(index.random_entry(Some(99), &mut rng).is_none());
    assert!(VectorIndex::new(4).random_entry(None, &mut rng).is_none());
}

#[test]
fn snapshot_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let g = tiny_embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps: Vec<Episode> = (0..5).map(|i| episode(&mut rng, i % 2, i as u64, 70)).collect();
    let index = build_index(&eps, &g, 50).unwrap();
    index.save(dir.path()).unwrap();
    let back = VectorIndex::load(dir.path()).unwrap();
    assert_eq!(back.entries(), index.entries());

    let keys = dir.path().join("keys.f32");
    let raw = std::fs::read(&keys).unwrap();
    std::fs::write(&keys, &raw[..raw.len() - 4]).unwrap();
    assert!(VectorIndex::load(dir.path()).is_err());
    std::fs::write(&keys, &raw).unwrap();
    let m = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&m).unwrap().replace("radt-idx-1", "radt-idx-0");
    std::fs::write(&m, text).unwrap();
    assert!(VectorIndex::load(dir.path()).is_err());
}

#[test]
fn config_validation() {
    assert!(RetrievalConfig::default().validate().is_ok());
    assert!(RetrievalConfig { top_k: 60, ..Default::default() }.validate().is_err());
    assert!(RetrievalConfig { blend: 1.5, ..Default::default() }.validate().is_err());
    assert_eq!(RetrievalConfig::default().fetch_m(), 100);
}

proptest! {
    #[test]
    fn same_task_dominates_with_unit_alpha(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = random_index(&mut rng, 120, 6, 3);
        let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cands = index.search_topl(&q, 50, None).unwrap();
        let out = index.reweight_select(&cands, UtilityMode::Task(1), 1.0, cands.len());
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                let (ta, tb) = (index.entry(a.idx).task_id == 1, index.entry(b.idx).task_id == 1);
                if tb && !ta {
                    // only the boundary tie may put a cross-task candidate first
                    prop_assert!(b.relevance == 0.0 && a.relevance == 1.0);
                }
            }
        }
    }

    #[test]
    fn raising_alpha_never_demotes_best_utility(seed in 0u64..500, lo in 0.0f64..2.0, step in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = random_index(&mut rng, 100, 6, 3);
        let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cands = index.search_topl(&q, 30, None).unwrap();
        let n = cands.len();
        let rank_of_best = |alpha: f64| {
            let out = index.reweight_select(&cands, UtilityMode::Return, alpha, n);
            let best = out.iter().map(|s| s.utility).fold(f64::NEG_INFINITY, f64::max);
            out.iter().position(|s| s.utility == best).unwrap()
        };
        prop_assert!(rank_of_best(lo + step) <= rank_of_best(lo));
    }
}
