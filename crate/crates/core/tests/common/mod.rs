#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roiformer::config::{ModelConfig, RankConfig, SpatialEmbedding, WindowConfig};
use roiformer::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Row softmax by the textbook formula; `-inf` entries get weight 0.
pub fn naive_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// One attention head, one query at a time.
pub fn naive_head(q: &Tensor, k: &Tensor, v: &Tensor, allow: impl Fn(usize, usize) -> bool) -> Tensor {
    let (lq, dh) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    let dv = v.shape()[1];
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let mut s = vec![f64::NEG_INFINITY; lk];
        for j in 0..lk {
            if allow(i, j) {
                let mut d = 0.0;
                for c in 0..dh {
                    d += q.at(i, c) * k.at(j, c);
                }
                s[j] = d / (dh as f64).sqrt();
            }
        }
        let w = naive_softmax_row(&s);
        for j in 0..lk {
            for c in 0..dv {
                out[i * dv + c] += w[j] * v.at(j, c);
            }
        }
    }
    Tensor::new(vec![lq, dv], out).unwrap()
}

pub fn cols(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(r * (hi - lo));
    for i in 0..r {
        out.extend_from_slice(&t.data()[i * c + lo..i * c + hi]);
    }
    Tensor::new(vec![r, hi - lo], out).unwrap()
}

pub fn hcat(parts: &[Tensor]) -> Tensor {
    let r = parts[0].shape()[0];
    let mut out = Vec::new();
    let mut width = 0;
    for p in parts {
        width += p.shape()[1];
    }
    for i in 0..r {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![r, width], out).unwrap()
}

/// Multi-head attention by slicing projections into heads and looping.
pub fn naive_mha(
    xq: &Tensor,
    xkv: &Tensor,
    w: [&Tensor; 4],
    b_o: &Tensor,
    heads: usize,
    allow: impl Fn(usize, usize) -> bool + Copy,
) -> Tensor {
    let q = naive_matmul(xq, w[0]);
    let k = naive_matmul(xkv, w[1]);
    let v = naive_matmul(xkv, w[2]);
    let dh = q.shape()[1] / heads;
    let outs: Vec<Tensor> = (0..heads)
        .map(|h| {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            naive_head(&cols(&q, lo, hi), &cols(&k, lo, hi), &cols(&v, lo, hi), allow)
        })
        .collect();
    let mut y = naive_matmul(&hcat(&outs), w[3]);
    let d = y.shape()[1];
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b_o.data()[i % d];
    }
    y
}

/// Small config used by gradient and training tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        seq_len: 6,
        n_rois: 4,
        d_model: 8,
        d_a: 8,
        d_ff: 16,
        heads_encoder: 2,
        heads_decoder: 2,
        blocks_encoder: 1,
        blocks_decoder: 1,
        spatial_embedding: SpatialEmbedding::Linear,
        window: WindowConfig {
            back: 2,
            fwd: 2,
            blocks: vec![0],
        },
        rank: RankConfig { k: 2, applied: true },
        classifier_sizes: vec![6, 3, 1],
        ..ModelConfig::default()
    }
}
