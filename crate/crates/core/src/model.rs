//! The encoder-decoder network: embeddings, positional encoding, pre-LN
//! transformer blocks, co-attention, and the classification head.
//!
//! Parameter layout (all names relative to the [`ParamSet`] root):
//!
//! | prefix                  | contents                                       |
//! |-------------------------|------------------------------------------------|
//! | `temporal_embed`        | `w` (`S × d_model`), `b`                       |
//! | `spatial_embed`         | linear: `w` (`T × d_model`), `b`; CNN: `conv{i}.w`, `conv{i}.b` |
//! | `encoder.{i}`/`decoder.{i}` | `ln1`, `attn`, `ln2`, `ffn` (+ `ln_kv` on the co-attention block) |
//! | `head.fc{i}`            | `w`, `b`                                       |

use crate::attention::{
    co_attention, self_attention_spatial, self_attention_temporal, AttentionCtx,
    AttentionWeights, CapturedLayer, RankSpec, WindowSpec,
};
use crate::autodiff::{Graph, Mode, Padding, Var};
use crate::config::{ModelConfig, Perspective, SpatialEmbedding};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::{RngStream, Stream};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const POOL: usize = 2;

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_pe(length: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid("sinusoidal_pe", format!("d = {d} must be even")));
    }
    let mut out = vec![0.0; length * d];
    for pos in 0..length {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = angle.sin();
            out[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, d], out)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn linear_named(g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.w"))?;
    let b = bound.var(&format!("{prefix}.b"))?;
    linear(g, x, w, b)
}

/// Maps each time frame (a row of the `T × S` series) to `d_model`.
pub fn temporal_embed(g: &mut Graph, series: Var, w: Var, b: Var) -> Result<Var> {
    let (_, s) = g.value(series).dims2()?;
    if g.value(w).dims2()?.0 != s {
        return Err(Error::shape("temporal_embed", g.shape(series), g.shape(w)));
    }
    linear(g, series, w, b)
}

/// Maps each ROI's whole signal (a column of the `T × S` series) to `d_model`.
pub fn spatial_embed_linear(g: &mut Graph, series: Var, w: Var, b: Var) -> Result<Var> {
    let (t, _) = g.value(series).dims2()?;
    if g.value(w).dims2()?.0 != t {
        return Err(Error::shape("spatial_embed_linear", g.shape(series), g.shape(w)));
    }
    let cols = g.transpose(series)?;
    linear(g, cols, w, b)
}

/// Runs every ROI signal through the shared 1-D CNN and pools the
/// remaining time axis, giving `S × d_model`.
pub fn spatial_embed_cnn(
    g: &mut Graph,
    series: Var,
    kind: SpatialEmbedding,
    bound: &Bound,
    prefix: &str,
) -> Result<Var> {
    let (t, s) = g.value(series).dims2()?;
    let cols = g.transpose(series)?;
    let mut x = g.reshape(cols, &[s, 1, t])?;
    let n_convs = match kind {
        SpatialEmbedding::CnnOriginal => 3,
        SpatialEmbedding::CnnEnhanced => 4,
        SpatialEmbedding::Linear => {
            return Err(Error::invalid("spatial_embed_cnn", "linear embedding has no CNN"))
        }
    };
    for i in 0..n_convs {
        let w = bound.var(&format!("{prefix}.conv{i}.w"))?;
        let b = bound.var(&format!("{prefix}.conv{i}.b"))?;
        let k = g.shape(w)[2];
        let len = *g.shape(x).last().unwrap();
        if len < k {
            return Err(Error::invalid(
                "spatial_embed_cnn",
                format!("time axis pooled down to {len}, shorter than kernel {k}"),
            ));
        }
        x = g.conv1d(x, w, Some(b), 1, Padding::Same)?;
        x = g.gelu(x)?;
        if i < 2 {
            x = g.avg_pool1d(x, POOL, POOL)?;
        }
    }
    g.mean_last(x)
}

/// Block-level mask choice.
#[derive(Clone, Copy, Debug)]
pub enum BlockAttention {
    Temporal(Option<WindowSpec>),
    Spatial(Option<RankSpec>),
    /// Co-attention with keys/values from this (encoder) output.
    Cross(Var),
}

/// Shared per-forward state.
pub struct BlockCtx<'a> {
    pub mode: Mode,
    pub p_drop: f64,
    pub rng: &'a mut RngStream,
    pub capture: Option<&'a mut Vec<CapturedLayer>>,
}

/// Pre-LN block: `X₁ = X + Drop(MHA(LN(X)))`, `X₂ = X₁ + Drop(FFN(LN(X₁)))`.
pub fn transformer_block(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    attn: BlockAttention,
    layer_name: &str,
    ctx: &mut BlockCtx<'_>,
) -> Result<Var> {
    let p = |s: &str| format!("{prefix}.{s}");
    let h = g.layer_norm(x, bound.var(&p("ln1.gamma"))?, bound.var(&p("ln1.beta"))?, LN_EPS)?;
    let w = AttentionWeights::bind(g, bound, &p("attn"), heads)?;
    let mut heads_out = ctx.capture.as_ref().map(|_| Vec::new());
    let mut actx = AttentionCtx {
        mode: ctx.mode,
        rng: ctx.rng,
        capture: heads_out.as_mut(),
    };
    let a = match attn {
        BlockAttention::Temporal(window) => self_attention_temporal(g, h, &w, window, &mut actx)?,
        BlockAttention::Spatial(rank) => self_attention_spatial(g, h, &w, rank, &mut actx)?,
        BlockAttention::Cross(main) => {
            let m = g.layer_norm(
                main,
                bound.var(&p("ln_kv.gamma"))?,
                bound.var(&p("ln_kv.beta"))?,
                LN_EPS,
            )?;
            co_attention(g, m, h, &w, &mut actx)?
        }
    };
    if let (Some(cap), Some(heads)) = (ctx.capture.as_deref_mut(), heads_out) {
        cap.push(CapturedLayer {
            name: layer_name.to_string(),
            heads,
        });
    }
    let a = g.dropout(a, ctx.p_drop, ctx.mode, ctx.rng)?;
    let x1 = g.add(x, a)?;

    let h2 = g.layer_norm(x1, bound.var(&p("ln2.gamma"))?, bound.var(&p("ln2.beta"))?, LN_EPS)?;
    let f = linear_named(g, bound, &p("ffn.fc1"), h2)?;
    let f = g.gelu(f)?;
    let f = linear_named(g, bound, &p("ffn.fc2"), f)?;
    let f = g.dropout(f, ctx.p_drop, ctx.mode, ctx.rng)?;
    g.add(x1, f)
}

/// Result of [`model_forward`].
#[derive(Debug)]
pub struct Forward {
    pub prob: Var,
    pub encoder_out: Var,
    pub decoder_out: Option<Var>,
    pub captured: Vec<CapturedLayer>,
}

fn embed(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    series: Var,
    perspective: Perspective,
) -> Result<Var> {
    let e = match perspective {
        Perspective::Temporal => temporal_embed(
            g,
            series,
            bound.var("temporal_embed.w")?,
            bound.var("temporal_embed.b")?,
        )?,
        Perspective::Spatial => match cfg.spatial_embedding {
            SpatialEmbedding::Linear => spatial_embed_linear(
                g,
                series,
                bound.var("spatial_embed.w")?,
                bound.var("spatial_embed.b")?,
            )?,
            kind => spatial_embed_cnn(g, series, kind, bound, "spatial_embed")?,
        },
    };
    let len = g.shape(e)[0];
    let pe = g.constant(sinusoidal_pe(len, cfg.d_model)?);
    g.add(e, pe)
}

fn self_block_attention(cfg: &ModelConfig, perspective: Perspective, index: usize) -> BlockAttention {
    match perspective {
        Perspective::Temporal => {
            let w = &cfg.window;
            BlockAttention::Temporal(w.blocks.contains(&index).then_some(WindowSpec {
                back: w.back,
                fwd: w.fwd,
            }))
        }
        Perspective::Spatial => BlockAttention::Spatial(cfg.rank.applied.then_some(RankSpec {
            k: cfg.rank.k,
            p_drop: cfg.p_drop,
        })),
    }
}

/// Runs the encoder stack on its embedded input.
pub fn encoder_stack(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    x: Var,
    ctx: &mut BlockCtx<'_>,
) -> Result<Var> {
    let (perspective, _) = cfg.streams();
    let mut x = x;
    for i in 0..cfg.blocks_encoder {
        let attn = self_block_attention(cfg, perspective, i);
        x = transformer_block(
            g,
            bound,
            &format!("encoder.{i}"),
            x,
            cfg.heads_encoder,
            attn,
            &format!("encoder{i}"),
            ctx,
        )?;
    }
    Ok(x)
}

/// Runs the decoder stack: self-attention blocks, then one co-attention
/// block reading `main` (the encoder output).
pub fn decoder_stack(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    x: Var,
    main: Var,
    ctx: &mut BlockCtx<'_>,
) -> Result<Var> {
    let (_, Some(perspective)) = cfg.streams() else {
        return Err(Error::invalid("decoder_stack", "variant has no decoder"));
    };
    let mut x = x;
    let n = cfg.blocks_decoder;
    for i in 0..n {
        let (attn, name) = if i + 1 == n {
            (BlockAttention::Cross(main), "coattention".to_string())
        } else {
            (self_block_attention(cfg, perspective, i), format!("decoder{i}"))
        };
        x = transformer_block(
            g,
            bound,
            &format!("decoder.{i}"),
            x,
            cfg.heads_decoder,
            attn,
            &name,
            ctx,
        )?;
    }
    Ok(x)
}

/// Full forward pass for one subject.
///
/// `series` is `T × S`; `pheno` has `pheno_dim` entries. Returns the
/// positive-class probability as a `1 × 1` node.
pub fn model_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    series: &Tensor,
    pheno: &[f64],
    mode: Mode,
    rng: &mut RngStream,
    capture: bool,
) -> Result<Forward> {
    let (t, s) = series.dims2()?;
    if (t, s) != (cfg.seq_len, cfg.n_rois) {
        return Err(Error::shape(
            "model_forward",
            &[t, s],
            &[cfg.seq_len, cfg.n_rois],
        ));
    }
    if pheno.len() != cfg.pheno_dim {
        return Err(Error::shape("model_forward", &[pheno.len()], &[cfg.pheno_dim]));
    }
    let mut captured = Vec::new();
    let mut ctx = BlockCtx {
        mode,
        p_drop: cfg.p_drop,
        rng,
        capture: capture.then_some(&mut captured),
    };
    let input = g.constant(series.clone());
    let (enc_p, dec_p) = cfg.streams();

    let enc_in = embed(g, bound, cfg, input, enc_p)?;
    let encoder_out = encoder_stack(g, bound, cfg, enc_in, &mut ctx)?;
    let (decoder_out, last) = match dec_p {
        Some(p) => {
            let dec_in = embed(g, bound, cfg, input, p)?;
            let d = decoder_stack(g, bound, cfg, dec_in, encoder_out, &mut ctx)?;
            (Some(d), d)
        }
        None => (None, encoder_out),
    };

    let pooled = g.mean_rows(last)?;
    let fused = if pheno.is_empty() {
        pooled
    } else {
        let ph = g.constant(Tensor::vector(pheno.to_vec()));
        g.concat(&[pooled, ph])?
    };
    let width = g.value(fused).len();
    let mut z = g.reshape(fused, &[1, width])?;
    let n_fc = cfg.classifier_sizes.len();
    for i in 0..n_fc {
        z = linear_named(g, bound, &format!("head.fc{i}"), z)?;
        if i + 1 < n_fc {
            z = g.gelu(z)?;
        }
    }
    let prob = g.sigmoid(z)?;
    Ok(Forward {
        prob,
        encoder_out,
        decoder_out,
        captured,
    })
}

/// Convenience wrapper: eval-mode probability for one sample.
pub fn predict(params: &ParamSet, cfg: &ModelConfig, series: &Tensor, pheno: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut rng = RngStream::new(0, Stream::Dropout);
    let f = model_forward(&mut g, &bound, cfg, series, pheno, Mode::Eval, &mut rng, false)?;
    Ok(g.value(f.prob).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at ±2 std.
    TruncNormal(f64),
    HeNormal { fan_in: usize },
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter `cfg` needs.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let std = (1.0 / d as f64).sqrt();
    let tn = Init::TruncNormal(std);
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    let (enc_p, dec_p) = cfg.streams();
    let uses = |p: Perspective| enc_p == p || dec_p == Some(p);
    if uses(Perspective::Temporal) {
        push("temporal_embed.w".into(), vec![cfg.n_rois, d], tn);
        push("temporal_embed.b".into(), vec![d], Init::Zeros);
    }
    if uses(Perspective::Spatial) {
        match cfg.spatial_embedding {
            SpatialEmbedding::Linear => {
                push("spatial_embed.w".into(), vec![cfg.seq_len, d], tn);
                push("spatial_embed.b".into(), vec![d], Init::Zeros);
            }
            _ => {
                let mut c_in = 1;
                for (i, &c_out) in cfg.cnn_channels.iter().enumerate() {
                    let k = cfg.cnn_kernel;
                    push(
                        format!("spatial_embed.conv{i}.w"),
                        vec![c_out, c_in, k],
                        Init::HeNormal { fan_in: c_in * k },
                    );
                    push(format!("spatial_embed.conv{i}.b"), vec![c_out], Init::Zeros);
                    c_in = c_out;
                }
            }
        }
    }

    let block = |prefix: String, cross: bool, push: &mut dyn FnMut(String, Vec<usize>, Init)| {
        for ln in ["ln1", "ln2"].into_iter().chain(cross.then_some("ln_kv")) {
            push(format!("{prefix}.{ln}.gamma"), vec![d], Init::Ones);
            push(format!("{prefix}.{ln}.beta"), vec![d], Init::Zeros);
        }
        for w in ["w_q", "w_k", "w_v"] {
            push(format!("{prefix}.attn.{w}"), vec![d, cfg.d_a], tn);
        }
        push(format!("{prefix}.attn.w_o"), vec![cfg.d_a, d], tn);
        push(format!("{prefix}.attn.b_o"), vec![d], Init::Zeros);
        push(format!("{prefix}.ffn.fc1.w"), vec![d, cfg.d_ff], tn);
        push(format!("{prefix}.ffn.fc1.b"), vec![cfg.d_ff], Init::Zeros);
        push(format!("{prefix}.ffn.fc2.w"), vec![cfg.d_ff, d], tn);
        push(format!("{prefix}.ffn.fc2.b"), vec![d], Init::Zeros);
    };
    for i in 0..cfg.blocks_encoder {
        block(format!("encoder.{i}"), false, &mut push);
    }
    if cfg.variant.has_decoder() {
        for i in 0..cfg.blocks_decoder {
            block(format!("decoder.{i}"), i + 1 == cfg.blocks_decoder, &mut push);
        }
    }

    let mut fan_in = d + cfg.pheno_dim;
    let n_fc = cfg.classifier_sizes.len();
    for (i, &out) in cfg.classifier_sizes.iter().enumerate() {
        let init = if i + 1 == n_fc {
            Init::GlorotUniform { fan_in, fan_out: out }
        } else {
            Init::HeNormal { fan_in }
        };
        push(format!("head.fc{i}.w"), vec![fan_in, out], init);
        push(format!("head.fc{i}.b"), vec![out], Init::Zeros);
        fan_in = out;
    }
    specs
}

/// Draws fresh parameters for `cfg` from the `init` stream of `seed`.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = RngStream::new(seed, Stream::Init);
    let mut params = ParamSet::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| match init {
                Init::TruncNormal(std) => rng.truncated_normal(0.0, std),
                Init::HeNormal { fan_in } => rng.normal(0.0, (2.0 / fan_in as f64).sqrt()),
                Init::GlorotUniform { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (2.0 * rng.uniform() - 1.0) * limit
                }
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
            })
            .collect();
        params.insert(name, Tensor::new(shape, data).expect("spec shapes are non-empty"));
    }
    params
}
