use proptest::prelude::*;
use radt_nn::layers::Linear;
use radt_nn::{
    clip_global_norm, cross_entropy, grad_check, softmax, Block, BlockConfig, Checkpoint, Context, Dropout,
    GradCheckOptions, Init, ParamStore, ScalarGraph,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// p_i = 1 / sum_j exp(x_j - x_i), accumulated smallest-first.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let mut terms: Vec<f64> = x.iter().map(|&xj| (xj - xi).exp()).collect();
            terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            1.0 / terms.iter().sum::<f64>()
        })
        .collect()
}

#[test]
fn softmax_matches_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = softmax(&x);
        for (a, b) in p.iter().zip(softmax_oracle(&x)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
    assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
    let big = softmax(&[1000.0f64, 0.0]);
    assert!((big[0] - 1.0).abs() < 1e-12 && big[1] >= 0.0 && big[1] < 1e-300);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn clipped_norm_never_exceeds_limit(g in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("g", &[g.len()], Init::Zeros, true, &mut rng);
        ps.grad_mut(id).copy_from_slice(&g);
        let before = ps.grad_norm();
        clip_global_norm(&mut ps, 0.25);
        prop_assert!(ps.grad_norm() <= 0.25 + 1e-12);
        if before <= 0.25 {
            prop_assert_eq!(ps.get(id).grad.clone(), g);
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn causal_block_ignores_future_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::<f32>::new();
    let cfg = BlockConfig { d: 16, heads: 4, mlp_ratio: 4, cross_attention: false, causal: true };
    let blk = Block::new(&mut ps, "b", cfg, &mut rng);
    let t = 6;
    let x: Vec<f32> = (0..t * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let valid = vec![true; t];
    let (y, _) = blk.forward(&ps, x.clone(), 1, t, &valid, None, &mut Dropout::off());
    for j in 0..t {
        let mut xp = x.clone();
        xp[j * 16..(j + 1) * 16].iter_mut().for_each(|v| *v += 0.5);
        let (yp, _) = blk.forward(&ps, xp, 1, t, &valid, None, &mut Dropout::off());
        assert_eq!(&y[..j * 16], &yp[..j * 16], "position < {j} changed");
        assert_ne!(&y[j * 16..(j + 1) * 16], &yp[j * 16..(j + 1) * 16]);
    }
}

#[test]
fn cross_block_without_context_equals_residual_only_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::<f64>::new();
    let cfg = BlockConfig { d: 8, heads: 2, mlp_ratio: 4, cross_attention: true, causal: true };
    let blk = Block::new(&mut ps, "b", cfg, &mut rng);
    let x = randn(&mut rng, 2 * 4 * 8);
    let valid = vec![true; 8];
    let (with_none, _) = blk.forward(&ps, x.clone(), 2, 4, &valid, None, &mut Dropout::off());
    let ctx_data = randn(&mut rng, 2 * 3 * 8);
    let kv = vec![true; 6];
    let ctx = Context { data: &ctx_data, len: 3, key_valid: &kv, present: &[false, false] };
    let (with_absent, c) = blk.forward(&ps, x, 2, 4, &valid, Some(&ctx), &mut Dropout::off());
    assert_eq!(with_none, with_absent);
    assert!(c.cross_attention().is_none());
}

/// Two pre-norm blocks (self + cross attention) followed by a linear head and cross-entropy.
struct TwoBlockGraph {
    blocks: Vec<Block>,
    head: Linear,
    x: Vec<f64>,
    ctx: Vec<f64>,
    ctx_valid: Vec<bool>,
    present: Vec<bool>,
    valid: Vec<bool>,
    targets: Vec<Option<usize>>,
    b: usize,
    t: usize,
    s: usize,
}

impl ScalarGraph for TwoBlockGraph {
    fn is_deterministic(&self) -> bool {
        true
    }

    fn loss(&mut self, ps: &mut ParamStore<f64>, backward: bool) -> f64 {
        let ctx = Context { data: &self.ctx, len: self.s, key_valid: &self.ctx_valid, present: &self.present };
        let mut h = self.x.clone();
        let mut caches = Vec::new();
        for blk in &self.blocks {
            let (y, c) = blk.forward(ps, h, self.b, self.t, &self.valid, Some(&ctx), &mut Dropout::off());
            caches.push(c);
            h = y;
        }
        let n = self.b * self.t;
        let logits = self.head.forward(ps, &h, n);
        let (loss, dl) = cross_entropy(&logits, 5, &self.targets);
        if backward {
            let mut dh = self.head.backward(ps, &h, &dl, n, true);
            for (blk, c) in self.blocks.iter().zip(&caches).rev() {
                dh = blk.backward(ps, c, &dh, self.b, self.t, Some(&ctx)).0;
            }
        }
        loss
    }
}

#[test]
fn two_block_attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ps = ParamStore::<f64>::new();
    let cfg = BlockConfig { d: 8, heads: 2, mlp_ratio: 4, cross_attention: true, causal: true };
    let blocks = vec![Block::new(&mut ps, "b0", cfg, &mut rng), Block::new(&mut ps, "b1", cfg, &mut rng)];
    let head = Linear::new(&mut ps, "head", 8, 5, &mut rng);
    // larger weights so the check is not dominated by near-zero gradients
    for p in ps.iter_mut() {
        if p.name.ends_with(".w") {
            p.value.iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let (b, t, s) = (2, 4, 3);
    let mut valid = vec![true; b * t];
    valid[t - 1] = false;
    let mut g = TwoBlockGraph {
        blocks,
        head,
        x: randn(&mut rng, b * t * 8),
        ctx: randn(&mut rng, b * s * 8),
        ctx_valid: vec![true, true, false, true, true, true],
        present: vec![true, false],
        valid,
        targets: (0..b * t).map(|i| if i % 3 == 2 { None } else { Some(i % 5) }).collect(),
        b,
        t,
        s,
    };
    let r = grad_check(&mut g, &mut ps, GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-3, "worst {} at {}", r.max_rel_error, r.worst_param);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::<f32>::new();
    Block::new(&mut ps, "b", BlockConfig { d: 8, heads: 2, mlp_ratio: 4, cross_attention: true, causal: true }, &mut rng);
    let ck = Checkpoint::from_params(&ps, serde_json::json!({"d": 8}), None);
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}
