use proptest::prelude::*;
use radt::embed::{DomainAgnostic, EmbeddingModel, EncoderConfig, FrozenEncoder, FrozenHopfield, DEFAULT_BETA};
use radt::policy::{tokenize, Layout, PolicyConfig, PolicyModel};
use radt::traj::Segment;
use radt_nn::{AdamW, AdamWConfig, Dropout, NnError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Explicit `E^T softmax(beta E P x)` with loops and a two-pass softmax.
fn fh_oracle(e: &[f64], p: &[f64], v: usize, d_lm: usize, d_in: usize, beta: f64, x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; d_lm];
    for r in 0..d_lm {
        for c in 0..d_in {
            z[r] += p[r * d_in + c] * x[c];
        }
    }
    let mut logits = vec![0.0; v];
    for i in 0..v {
        for r in 0..d_lm {
            logits[i] += beta * e[i * d_lm + r] * z[r];
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0; d_lm];
    for i in 0..v {
        for r in 0..d_lm {
            out[r] += exps[i] / total * e[i * d_lm + r];
        }
    }
    out
}

fn segment(rng: &mut ChaCha8Rng, len: usize, n_states: u32) -> Segment {
    let mut s = Segment::default();
    for t in 0..len {
        s.push(rng.gen_range(0..n_states), rng.gen_range(0..5), rng.gen_range(0..2), rng.gen_range(0..20) as f32, t as u32);
    }
    s
}

fn agnostic(seed: u64) -> EmbeddingModel {
    let enc = FrozenEncoder::random(EncoderConfig { seed, ..Default::default() }).unwrap();
    let da = DomainAgnostic::new(enc, 25, Layout::RtgStateActionReward, 25.0, 25, DEFAULT_BETA, seed).unwrap();
    EmbeddingModel::DomainAgnostic(Box::new(da))
}

fn specific(seed: u64) -> EmbeddingModel {
    let cfg = PolicyConfig { dropout: 0.0, ..PolicyConfig::desk(25, 25, 10, false) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingModel::domain_specific(PolicyModel::new(cfg, &mut rng).unwrap())
}

#[test]
fn matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (v, d_lm, d_in) = (8, 4, 6);
    for trial in 0..50 {
        let e = randn(v * d_lm, &mut rng);
        let fh = FrozenHopfield::new(e.clone(), v, d_lm, d_in, 10.0, trial).unwrap();
        let x = randn(d_in, &mut rng);
        let want = fh_oracle(&e, fh.projection(), v, d_lm, d_in, 10.0, &x);
        for (a, b) in fh.project(&x).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn projection_variance_and_determinism() {
    let e = vec![0.0; 64 * 16];
    let fh = FrozenHopfield::new(e.clone(), 64, 16, 400, 10.0, 3).unwrap();
    let p = fh.projection();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let var = p.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / p.len() as f64;
    assert!((var / 25.0 - 1.0).abs() < 0.05, "variance {var}");
    assert_eq!(p, FrozenHopfield::new(e, 64, 16, 400, 10.0, 3).unwrap().projection());
}

#[test]
fn zero_temperature_gives_row_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (v, d) = (12, 5);
    let e = randn(v * d, &mut rng);
    let fh = FrozenHopfield::new(e.clone(), v, d, 7, 0.0, 0).unwrap();
    let mean: Vec<f64> = (0..d).map(|c| (0..v).map(|i| e[i * d + c]).sum::<f64>() / v as f64).collect();
    for _ in 0..20 {
        let out = fh.project(&randn(7, &mut rng)).unwrap();
        for (a, b) in out.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn single_row_vocabulary_returns_that_row() {
    let fh = FrozenHopfield::new(vec![0.5, -1.0, 2.0], 1, 3, 4, 10.0, 0).unwrap();
    assert_eq!(fh.project(&[1.0, -2.0, 0.0, 3.0]).unwrap(), vec![0.5, -1.0, 2.0]);
}

#[test]
fn dimension_errors() {
    let fh = FrozenHopfield::new(vec![0.0; 6], 2, 3, 4, 10.0, 0).unwrap();
    assert!(fh.project(&[1.0, 2.0]).is_err());
    assert!(FrozenHopfield::new(vec![0.0; 5], 2, 3, 4, 10.0, 0).is_err());
}

proptest! {
    #[test]
    fn weights_form_a_convex_combination(seed in 0u64..1000, beta in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, d_in) = (16, 6, 5);
        let e = randn(v * d, &mut rng);
        let fh = FrozenHopfield::new(e.clone(), v, d, d_in, beta, seed).unwrap();
        let x = randn(d_in, &mut rng);
        let w = fh.weights(&x).unwrap();
        prop_assert!(w.iter().all(|&p| p >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let out = fh.project(&x).unwrap();
        for c in 0..d {
            let hull: f64 = (0..v).map(|i| w[i] * e[i * d + c]).sum();
            prop_assert!((out[c] - hull).abs() < 1e-12);
        }
    }

    #[test]
    fn large_beta_recovers_argmax_row(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, d_in) = (16, 6, 5);
        let e = randn(v * d, &mut rng);
        let fh = FrozenHopfield::new(e.clone(), v, d, d_in, 1e3, seed).unwrap();
        let x = randn(d_in, &mut rng);
        // logits at beta = 1 decide separation
        let unit = FrozenHopfield::new(e.clone(), v, d, d_in, 1.0, seed).unwrap();
        let z: Vec<f64> = (0..d).map(|r| (0..d_in).map(|c| unit.projection()[r * d_in + c] * x[c]).sum()).collect();
        let mut logits: Vec<(f64, usize)> =
            (0..v).map(|i| ((0..d).map(|r| e[i * d + r] * z[r]).sum(), i)).collect();
        logits.sort_by(|a, b| b.0.total_cmp(&a.0));
        prop_assume!(1e3 * (logits[0].0 - logits[1].0) > 20.0);
        let top = logits[0].1;
        let out = fh.project(&x).unwrap();
        for c in 0..d {
            prop_assert!((out[c] - e[top * d + c]).abs() < 1e-3);
        }
    }
}

#[test]
fn one_step_embedding_is_the_state_hidden_vector() {
    let g = specific(4);
    let EmbeddingModel::DomainSpecific(policy) = &g else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = segment(&mut rng, 1, 25);
    let tb = tokenize(&[&s], 1, Layout::RtgStateActionReward).unwrap();
    let hidden = policy.forward(&tb, None, None, &mut Dropout::off()).hidden;
    let r = tb.state_row(0);
    assert_eq!(g.embed(&s).unwrap(), hidden[r * 64..(r + 1) * 64].to_vec());
}

#[test]
fn embedding_is_deterministic_and_mixes_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for g in [agnostic(5), specific(5)] {
        let s = segment(&mut rng, 10, 25);
        let a = g.embed(&s).unwrap();
        assert_eq!(a.len(), g.dim());
        assert_eq!(a, g.embed(&s).unwrap());
        let mut t = s.clone();
        t.actions.reverse();
        if t.actions != s.actions {
            assert_ne!(a, g.embed(&t).unwrap());
        }
        assert!(g.embed(&Segment::default()).is_err());
    }
}

#[test]
fn batched_embedding_matches_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for g in [agnostic(6), specific(6)] {
        let segs: Vec<Segment> = (1..6).map(|n| segment(&mut rng, 2 * n, 25)).collect();
        let refs: Vec<&Segment> = segs.iter().collect();
        let batch = g.embed_batch(&refs).unwrap();
        for (s, row) in segs.iter().zip(batch.chunks(g.dim())) {
            for (a, b) in g.embed(s).unwrap().iter().zip(row) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn query_dropout_changes_embedding_and_zero_rate_does_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = agnostic(7);
    let s = segment(&mut rng, 10, 25);
    let clean = g.embed(&s).unwrap();
    assert_eq!(g.embed_batch_dropped(&[&s], 0.0, &mut rng).unwrap(), clean);
    assert_ne!(g.embed_batch_dropped(&[&s], 0.5, &mut rng).unwrap(), clean);
}

#[test]
fn bundled_encoder_round_trip_and_pinned_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.ckpt");
    let enc = FrozenEncoder::random(EncoderConfig::default()).unwrap();
    enc.save(&path).unwrap();
    let back = FrozenEncoder::load(&path).unwrap();
    assert_eq!(back.params.digest(), enc.params.digest());
    assert!(back.params.is_frozen());
    let da = DomainAgnostic::new(back, 100, Layout::RtgStateActionReward, 100.0, 100, DEFAULT_BETA, 0).unwrap();
    let g = EmbeddingModel::DomainAgnostic(Box::new(da));
    let mut canonical = Segment::default();
    for t in 0..5u32 {
        canonical.push(t * 11, (t % 5) as u8, (t == 4) as u8, (5 - t) as f32, t);
    }
    let out = g.embed(&canonical).unwrap();
    let pinned = [PINNED_0, PINNED_1, PINNED_2, PINNED_3];
    for (a, b) in out.iter().zip(pinned) {
        assert!((a - b).abs() < 1e-4, "{:?}", &out[..4]);
    }
    assert!(FrozenEncoder::load(&dir.path().join("missing.ckpt")).is_err());
}

const PINNED_0: f32 = 0.258_226_4;
const PINNED_1: f32 = 0.165_279_78;
const PINNED_2: f32 = -0.642_318;
const PINNED_3: f32 = -0.283_324_12;

#[test]
fn checkpoint_kinds_are_not_interchangeable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let policy = PolicyModel::<f32>::new(PolicyConfig::desk(25, 25, 10, false), &mut rng).unwrap();
    policy.to_checkpoint(None).save(&path).unwrap();
    assert!(FrozenEncoder::load(&path).is_err());
    let ck = radt_nn::Checkpoint::load(&path).unwrap();
    let g = EmbeddingModel::domain_specific(PolicyModel::from_checkpoint(&ck).unwrap());
    assert_eq!(g.dim(), 64);
}

#[test]
fn frozen_models_refuse_updates_and_keep_digests() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut enc = FrozenEncoder::random(EncoderConfig::default()).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &enc.params);
    assert!(matches!(opt.step(&mut enc.params), Err(NnError::Frozen)));
    for g in [agnostic(9), specific(9)] {
        let before = g.param_digest();
        let s = segment(&mut rng, 10, 25);
        g.embed(&s).unwrap();
        g.embed_batch_dropped(&[&s], 0.3, &mut rng).unwrap();
        assert_eq!(before, g.param_digest());
        if let EmbeddingModel::DomainSpecific(p) = &g {
            assert!(p.params.is_frozen());
        }
    }
}
