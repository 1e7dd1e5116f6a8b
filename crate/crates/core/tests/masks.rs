mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use roiformer::attention::{
    build_window_mask, multi_head_attention, roi_rank_mask, scaled_dot_attention, AttentionCtx,
    AttentionWeights, MaskStrategy, RankSpec, WindowSpec,
};
use roiformer::params::ParamSet;
use roiformer::rng::{RngStream, Stream};
use roiformer::{Graph, Mode, Tensor};

fn attention_params(r: &mut rand_chacha::ChaCha8Rng, d: usize, d_a: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for n in ["w_q", "w_k", "w_v"] {
        p.insert(format!("a.{n}"), rand_tensor(r, &[d, d_a]));
    }
    p.insert("a.w_o", rand_tensor(r, &[d_a, d]));
    p.insert("a.b_o", rand_tensor(r, &[d]));
    p
}

fn run(p: &ParamSet, x: &Tensor, heads: usize, strategy: MaskStrategy, capture: Option<&mut Vec<Tensor>>) -> Tensor {
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let w = AttentionWeights::bind(&g, &bound, "a", heads).unwrap();
    let vx = g.constant(x.clone());
    let mut rs = RngStream::new(0, Stream::Dropout);
    let mut ctx = AttentionCtx { mode: Mode::Eval, rng: &mut rs, capture };
    let y = multi_head_attention(&mut g, vx, vx, &w, strategy, &mut ctx).unwrap();
    g.value(y).clone()
}

#[test]
fn window_examples() {
    let m = build_window_mask(5, 1, 1).unwrap();
    assert_eq!(m.allowed(0), vec![0, 1]);
    assert_eq!(m.allowed(2), vec![1, 2, 3]);
    assert_eq!(m.allowed(4), vec![3, 4]);
    let full = build_window_mask(5, 4, 4).unwrap();
    assert!(full.values().iter().all(|&v| v == 0.0));
    let diag = build_window_mask(4, 0, 0).unwrap();
    for i in 0..4 {
        assert_eq!(diag.allowed(i), vec![i]);
    }
}

#[test]
fn out_of_window_keys_do_not_reach_the_query() {
    let mut r = rng(11);
    let mut changed_inside = 0;
    for trial in 0..100 {
        let t = r.random_range(4..12);
        let d = 4;
        let heads = [1, 2][trial % 2];
        let spec = WindowSpec { back: r.random_range(0..3), fwd: r.random_range(0..3) };
        let p = attention_params(&mut r, d, 4);
        let x = rand_tensor(&mut r, &[t, d]);
        let base = run(&p, &x, heads, MaskStrategy::Window(spec), None);

        let i = r.random_range(0..t);
        let j = r.random_range(0..t);
        let mut xp = x.clone();
        for c in 0..d {
            xp.set(j, c, x.at(j, c) + 3.0);
        }
        let pert = run(&p, &xp, heads, MaskStrategy::Window(spec), None);
        let inside = j + spec.back >= i && j <= i + spec.fwd;
        if inside {
            if pert.row(i) != base.row(i) {
                changed_inside += 1;
            }
        } else {
            assert_eq!(pert.row(i), base.row(i), "trial {trial}: key {j} outside window of {i}");
        }
    }
    assert!(changed_inside > 0);
}

#[test]
fn in_window_perturbation_changes_output() {
    let mut r = rng(12);
    for _ in 0..100 {
        let t = 8;
        let spec = WindowSpec::symmetric(2);
        let p = attention_params(&mut r, 4, 4);
        let x = rand_tensor(&mut r, &[t, 4]);
        let base = run(&p, &x, 2, MaskStrategy::Window(spec), None);
        let i = r.random_range(0..t);
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(t - 1);
        let j = r.random_range(lo..=hi);
        let mut xp = x.clone();
        for c in 0..4 {
            xp.set(j, c, x.at(j, c) + 1.0);
        }
        let pert = run(&p, &xp, 2, MaskStrategy::Window(spec), None);
        assert_ne!(pert.row(i), base.row(i));
    }
}

#[test]
fn rank_mask_keeps_exactly_k_per_row() {
    let mut r = rng(13);
    for _ in 0..50 {
        let s = r.random_range(2..12);
        let k = r.random_range(1..=s);
        let scores = rand_tensor(&mut r, &[s, s]);
        let mut rs = RngStream::new(0, Stream::Dropout);
        let m = roi_rank_mask(&scores, k, 0.1, Mode::Eval, &mut rs).unwrap();
        for i in 0..s {
            let kept = m.allowed(i);
            assert_eq!(kept.len(), k);
            let floor = kept.iter().map(|&j| scores.at(i, j)).fold(f64::INFINITY, f64::min);
            for j in (0..s).filter(|j| !kept.contains(j)) {
                assert!(scores.at(i, j) <= floor);
            }
        }
    }
}

#[test]
fn rank_examples() {
    let scores = Tensor::from_rows(&[vec![0.1, 0.9, 0.5, 0.3]]).unwrap();
    let mut rs = RngStream::new(0, Stream::Dropout);
    let m = roi_rank_mask(&scores, 2, 0.0, Mode::Eval, &mut rs).unwrap();
    assert_eq!(m.allowed(0), vec![1, 2]);
    let tied = Tensor::from_rows(&[vec![0.5, 0.5, 0.5]]).unwrap();
    let m = roi_rank_mask(&tied, 1, 0.0, Mode::Eval, &mut rs).unwrap();
    assert_eq!(m.allowed(0), vec![0]);
    assert!(roi_rank_mask(&tied, 4, 0.0, Mode::Eval, &mut rs).is_err());
    assert!(roi_rank_mask(&tied, 0, 0.0, Mode::Eval, &mut rs).is_err());
}

#[test]
fn rank_with_all_keys_is_unmasked_attention() {
    let mut r = rng(14);
    for heads in [1, 2, 4] {
        let s = 9;
        let p = attention_params(&mut r, 6, 8);
        let x = rand_tensor(&mut r, &[s, 6]);
        let full = run(&p, &x, heads, MaskStrategy::Rank(RankSpec { k: s, p_drop: 0.1 }), None);
        let plain = run(&p, &x, heads, MaskStrategy::None, None);
        assert!(full.max_abs_diff(&plain) < 1e-12);
    }
}

#[test]
fn rank_one_is_argmax_attention() {
    let mut r = rng(15);
    for _ in 0..20 {
        let (s, dh) = (7, 3);
        let q = rand_tensor(&mut r, &[s, dh]);
        let k = rand_tensor(&mut r, &[s, dh]);
        let v = rand_tensor(&mut r, &[s, 2]);
        let raw = naive_matmul(&q, &k.transpose().unwrap()).map(|x| x / (dh as f64).sqrt());
        let mut rs = RngStream::new(0, Stream::Dropout);
        let mask = roi_rank_mask(&raw, 1, 0.1, Mode::Eval, &mut rs).unwrap();
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let h = scaled_dot_attention(&mut g, vq, vk, vv, Some(&mask)).unwrap();
        for i in 0..s {
            let row = raw.row(i);
            let best = (0..s).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            assert_eq!(g.value(h.output).row(i), v.row(best));
        }
    }
}

#[test]
fn rank_mask_is_built_per_head() {
    let mut r = rng(16);
    let p = attention_params(&mut r, 6, 8);
    let x = rand_tensor(&mut r, &[10, 6]);
    let mut cap = Vec::new();
    run(&p, &x, 4, MaskStrategy::Rank(RankSpec { k: 3, p_drop: 0.0 }), Some(&mut cap));
    assert_eq!(cap.len(), 4);
    let support = |w: &Tensor| -> Vec<Vec<bool>> {
        (0..10).map(|i| w.row(i).iter().map(|&v| v > 0.0).collect()).collect()
    };
    for w in &cap {
        for i in 0..10 {
            assert_eq!(w.row(i).iter().filter(|&&v| v > 0.0).count(), 3);
        }
    }
    assert!(cap.windows(2).any(|p| support(&p[0]) != support(&p[1])));
}

#[test]
fn training_selection_dropout_is_seeded() {
    let mut r = rng(17);
    let scores = rand_tensor(&mut r, &[6, 6]);
    let a = roi_rank_mask(&scores, 2, 0.5, Mode::Train, &mut RngStream::new(3, Stream::Dropout)).unwrap();
    let b = roi_rank_mask(&scores, 2, 0.5, Mode::Train, &mut RngStream::new(3, Stream::Dropout)).unwrap();
    assert_eq!(a.values(), b.values());
    for i in 0..6 {
        assert_eq!(a.allowed(i).len(), 2);
    }
}

proptest! {
    #[test]
    fn window_band_matches_definition(t in 1usize..20, back in 0usize..25, fwd in 0usize..25) {
        let m = build_window_mask(t, back, fwd).unwrap();
        for i in 0..t {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(t - 1);
            prop_assert_eq!(m.allowed(i), (lo..=hi).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rank_survivors_are_the_top_k(
        row in prop::collection::vec(-5.0f64..5.0, 1..15),
        k_frac in 0.0f64..1.0,
    ) {
        let s = row.len();
        let k = 1 + ((s - 1) as f64 * k_frac) as usize;
        let scores = Tensor::new(vec![1, s], row.clone()).unwrap();
        let mut rs = RngStream::new(0, Stream::Dropout);
        let m = roi_rank_mask(&scores, k, 0.0, Mode::Eval, &mut rs).unwrap();
        let mut idx: Vec<usize> = (0..s).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let mut want = idx[..k].to_vec();
        want.sort();
        prop_assert_eq!(m.allowed(0), want);
    }
}
