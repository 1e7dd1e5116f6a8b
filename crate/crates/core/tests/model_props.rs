mod common;

use common::*;
use roiformer::attention::{multi_head_attention, AttentionCtx, AttentionWeights, MaskStrategy};
use roiformer::config::{SpatialEmbedding, Variant};
use roiformer::model::{
    decoder_stack, encoder_stack, init_parameters, model_forward, param_specs, predict,
    spatial_embed_cnn, BlockCtx,
};
use roiformer::params::ParamSet;
use roiformer::rng::{RngStream, Stream};
use roiformer::{Graph, Mode, ModelConfig, Tensor};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn zero_residual_branches(p: &mut ParamSet) {
    let names: Vec<String> = p
        .names()
        .filter(|n| n.ends_with("attn.w_o") || n.ends_with("attn.b_o") || n.contains("ffn.fc2"))
        .map(str::to_owned)
        .collect();
    for n in names {
        p.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

#[test]
fn stacks_are_identity_when_branches_are_zero() {
    for variant in [Variant::EncDecTemporalSpatial, Variant::EncDecSpatialTemporal] {
        let cfg = ModelConfig {
            variant,
            blocks_encoder: 2,
            blocks_decoder: 2,
            window: roiformer::config::WindowConfig::disabled(),
            ..tiny_config()
        };
        let mut p = init_parameters(&cfg, 5);
        zero_residual_branches(&mut p);
        let mut r = rng(21);
        let enc_in = rand_tensor(&mut r, &[cfg.seq_len, cfg.d_model]);
        let dec_in = rand_tensor(&mut r, &[cfg.n_rois, cfg.d_model]);
        for mode in [Mode::Eval, Mode::Train] {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let mut rs = RngStream::new(1, Stream::Dropout);
            let mut ctx = BlockCtx { mode, p_drop: 0.3, rng: &mut rs, capture: None };
            let e = g.constant(enc_in.clone());
            let d = g.constant(dec_in.clone());
            let eo = encoder_stack(&mut g, &b, &cfg, e, &mut ctx).unwrap();
            let d_o = decoder_stack(&mut g, &b, &cfg, d, eo, &mut ctx).unwrap();
            assert_eq!(g.value(eo), &enc_in);
            assert_eq!(g.value(d_o), &dec_in);
        }
    }
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut r = rng(22);
    let (l, d) = (6, 4);
    let mut p = ParamSet::new();
    for n in ["w_q", "w_k", "w_v"] {
        p.insert(format!("a.{n}"), rand_tensor(&mut r, &[d, 4]));
    }
    p.insert("a.w_o", rand_tensor(&mut r, &[4, d]));
    p.insert("a.b_o", rand_tensor(&mut r, &[d]));
    let x = rand_tensor(&mut r, &[l, d]);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor| {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let w = AttentionWeights::bind(&g, &b, "a", 2).unwrap();
        let v = g.constant(x.clone());
        let mut rs = RngStream::new(0, Stream::Dropout);
        let mut ctx = AttentionCtx { mode: Mode::Eval, rng: &mut rs, capture: None };
        let y = multi_head_attention(&mut g, v, v, &w, MaskStrategy::None, &mut ctx).unwrap();
        g.value(y).clone()
    };
    assert!(run(&permute(&x)).max_abs_diff(&permute(&run(&x))) < 1e-12);
}

#[test]
fn model_shapes_follow_config() {
    let cfg = tiny_config();
    let p = init_parameters(&cfg, 1);
    let series = rand_tensor(&mut rng(23), &[cfg.seq_len, cfg.n_rois]);
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let mut rs = RngStream::new(0, Stream::Dropout);
    let f = model_forward(&mut g, &b, &cfg, &series, &[0.0; 5], Mode::Eval, &mut rs, true).unwrap();
    assert_eq!(g.shape(f.encoder_out), &[cfg.seq_len, cfg.d_model]);
    assert_eq!(g.shape(f.decoder_out.unwrap()), &[cfg.n_rois, cfg.d_model]);
    let prob = g.value(f.prob).data()[0];
    assert!(prob > 0.0 && prob < 1.0);
    let names: Vec<&str> = f.captured.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["encoder0", "coattention"]);
    assert_eq!(f.captured[1].heads[0].shape(), &[cfg.n_rois, cfg.seq_len]);
}

#[test]
fn wrong_series_shape_is_rejected() {
    let cfg = tiny_config();
    let p = init_parameters(&cfg, 1);
    let err = predict(&p, &cfg, &Tensor::zeros(&[cfg.seq_len, cfg.n_rois + 1]), &[0.0; 5]);
    assert!(err.is_err());
}

#[test]
fn transformer_init_statistics() {
    let cfg = ModelConfig::default();
    let p = init_parameters(&cfg, 0);
    let w = p.get("encoder.0.attn.w_q").unwrap();
    assert_eq!(w.shape(), &[256, 256]);
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Std of N(0, σ²) truncated to [-2σ, 2σ]: σ·sqrt(1 − 4φ(2)/(2Φ(2) − 1)).
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let nominal = 0.0625;
    let shrink = (1.0 - 4.0 * n01.pdf(2.0) / (2.0 * n01.cdf(2.0) - 1.0)).sqrt();
    assert!((std - shrink * nominal).abs() < 0.05 * shrink * nominal, "std {std}");
    assert!(w.data().iter().all(|v| v.abs() <= 2.0 * nominal));
    assert!(p.get("encoder.0.ln1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(p.get("head.fc0.b").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(init_parameters(&cfg, 0), p);
    assert_ne!(init_parameters(&cfg, 1).get("encoder.0.attn.w_q").unwrap(), w);
}

#[test]
fn classifier_init_ranges() {
    let cfg = ModelConfig::default();
    let p = init_parameters(&cfg, 0);
    let last = p.get("head.fc2.w").unwrap();
    let limit = (6.0f64 / 11.0).sqrt();
    assert!(last.data().iter().all(|v| v.abs() <= limit));
    let first = p.get("head.fc0.w").unwrap();
    let n = first.len() as f64;
    let std = (first.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let he = (2.0f64 / 261.0).sqrt();
    assert!((std - he).abs() < 0.05 * he, "std {std}");
}

#[test]
fn cnn_embedding_matches_per_roi_loop() {
    let cfg = ModelConfig {
        seq_len: 20,
        n_rois: 3,
        d_model: 4,
        d_a: 4,
        cnn_channels: vec![2, 3, 4, 4],
        cnn_kernel: 3,
        ..tiny_config()
    };
    let cfg = ModelConfig { spatial_embedding: SpatialEmbedding::CnnEnhanced, ..cfg };
    let p = init_parameters(&cfg, 4);
    let series = rand_tensor(&mut rng(24), &[20, 3]);

    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let s = g.constant(series.clone());
    let e = spatial_embed_cnn(&mut g, s, cfg.spatial_embedding, &b, "spatial_embed").unwrap();
    let got = g.value(e).clone();
    assert_eq!(got.shape(), &[3, 4]);

    let gelu = roiformer::autodiff::gelu;
    for roi in 0..3 {
        let mut x: Vec<Vec<f64>> = vec![(0..20).map(|t| series.at(t, roi)).collect()];
        for layer in 0..4 {
            let w = p.get(&format!("spatial_embed.conv{layer}.w")).unwrap();
            let bias = p.get(&format!("spatial_embed.conv{layer}.b")).unwrap();
            let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let len = x[0].len();
            let pad = (k - 1) / 2;
            let mut y = vec![vec![0.0; len]; c_out];
            for o in 0..c_out {
                for t in 0..len {
                    let mut acc = bias.data()[o];
                    for c in 0..c_in {
                        for j in 0..k {
                            let pos = t as isize + j as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += w.data()[(o * c_in + c) * k + j] * x[c][pos as usize];
                            }
                        }
                    }
                    y[o][t] = gelu(acc);
                }
            }
            if layer < 2 {
                y = y.iter().map(|ch| ch.chunks_exact(2).map(|p| (p[0] + p[1]) / 2.0).collect()).collect();
            }
            x = y;
        }
        for c in 0..4 {
            let want = x[c].iter().sum::<f64>() / x[c].len() as f64;
            assert!((got.at(roi, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn default_cnn_embedding_shape() {
    let cfg = ModelConfig::default();
    let p = init_parameters(&cfg, 0);
    let series = rand_tensor(&mut rng(25), &[60, 190]);
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let s = g.constant(series);
    let e = spatial_embed_cnn(&mut g, s, cfg.spatial_embedding, &b, "spatial_embed").unwrap();
    assert_eq!(g.shape(e), &[190, 256]);
}

#[test]
fn variants_own_only_their_parameters() {
    let only_t = ModelConfig { variant: Variant::EncoderOnlyTemporal, ..ModelConfig::default() };
    assert!(param_specs(&only_t).iter().all(|s| !s.0.starts_with("decoder")));
    let only_s = ModelConfig { variant: Variant::EncoderOnlySpatial, window: roiformer::config::WindowConfig::disabled(), ..ModelConfig::default() };
    assert!(param_specs(&only_s).iter().all(|s| !s.0.starts_with("temporal_embed")));
    assert!(only_s.validate().is_empty());
    let swapped = ModelConfig { variant: Variant::EncDecSpatialTemporal, ..ModelConfig::default() };
    // Window on block 0 of the temporal decoder's single self-attention block.
    assert!(swapped.validate().is_empty());
    let p = init_parameters(&ModelConfig { variant: Variant::EncDecSpatialTemporal, ..tiny_config() }, 0);
    assert!(p.contains("decoder.0.ln_kv.gamma"));
}

#[test]
fn config_validation_lists_every_key() {
    let cfg = ModelConfig {
        heads_encoder: 3,
        rank: roiformer::config::RankConfig { k: 500, applied: true },
        seq_len: 8,
        ..ModelConfig::default()
    };
    let errs = cfg.validate();
    assert!(errs.iter().any(|e| e.contains("heads_encoder")));
    assert!(errs.iter().any(|e| e.contains("rank.k")));
    assert!(errs.iter().any(|e| e.contains("seq_len")));
    assert!(errs.iter().any(|e| e.contains("window.blocks")) || errs.len() >= 3);
}
