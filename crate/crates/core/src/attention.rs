//! Attention kernels: scaled dot-product attention, multi-head plumbing,
//! self- and co-attention, local temporal window masks and ROI-rank masks.
//!
//! All masking is additive: a query row's scores receive `0` on allowed
//! keys and `-inf` elsewhere before the softmax, so masked keys get
//! exactly zero weight.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Window,
    Rank,
    None,
}

/// A `{0, -inf}` matrix of shape `query_len × key_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    kind: MaskKind,
}

impl AdditiveMask {
    /// Builds a mask from an allow predicate. Every row must allow at
    /// least one key.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        kind: MaskKind,
        allow: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut values = vec![f64::NEG_INFINITY; rows * cols];
        for i in 0..rows {
            let mut any = false;
            for j in 0..cols {
                if allow(i, j) {
                    values[i * cols + j] = 0.0;
                    any = true;
                }
            }
            if !any {
                return Err(Error::DegenerateMask { row: i });
            }
        }
        Ok(AdditiveMask {
            rows,
            cols,
            values,
            kind,
        })
    }

    pub fn none(rows: usize, cols: usize) -> Self {
        AdditiveMask {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            kind: MaskKind::None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.values[i * self.cols + j] == 0.0
    }

    /// Allowed key indices of query row `i`, ascending.
    pub fn allowed(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.allows(i, j)).collect()
    }
}

/// Local temporal band: query `i` sees keys `i - back ..= i + fwd`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub back: usize,
    pub fwd: usize,
}

impl WindowSpec {
    pub fn symmetric(l: usize) -> Self {
        WindowSpec { back: l, fwd: l }
    }
}

/// Per-head, per-query top-k key selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSpec {
    pub k: usize,
    /// Dropout applied to the scores used for selection, training only.
    pub p_drop: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskStrategy {
    None,
    Window(WindowSpec),
    Rank(RankSpec),
}

/// Position `i` may attend `j` iff `max(0, i−back) ≤ j ≤ min(T−1, i+fwd)`.
pub fn build_window_mask(t: usize, back: usize, fwd: usize) -> Result<AdditiveMask> {
    if t == 0 {
        return Err(Error::invalid("build_window_mask", "sequence length must be positive"));
    }
    AdditiveMask::from_fn(t, t, MaskKind::Window, |i, j| {
        j + back >= i && j <= (i + fwd).min(t - 1)
    })
}

/// Keeps the `k` highest-scoring keys of each query row.
///
/// In training mode the selection runs on a dropout-perturbed copy of the
/// scores (zeroed entries compete at 0); the attended scores themselves are
/// never altered. Ties go to the lower key index.
pub fn roi_rank_mask(
    scores: &Tensor,
    k: usize,
    p_drop: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<AdditiveMask> {
    let (rows, cols) = scores.dims2()?;
    if k == 0 || k > cols {
        return Err(Error::invalid("roi_rank_mask", format!("k = {k} with {cols} keys")));
    }
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::invalid("roi_rank_mask", format!("p_drop = {p_drop}")));
    }
    let mut selection = scores.data().to_vec();
    if mode == Mode::Train && p_drop > 0.0 {
        let keep = 1.0 / (1.0 - p_drop);
        for s in &mut selection {
            *s = if rng.uniform() < p_drop { 0.0 } else { *s * keep };
        }
    }
    let mut values = vec![f64::NEG_INFINITY; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = &selection[i * cols..(i + 1) * cols];
        order.clear();
        order.extend(0..cols);
        // stable: equal scores keep ascending index order
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &j in &order[..k] {
            values[i * cols + j] = 0.0;
        }
    }
    Ok(AdditiveMask {
        rows,
        cols,
        values,
        kind: MaskKind::Rank,
    })
}

/// Pre-softmax scaled scores `q·kᵀ/√d_h` of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor,
}

/// Result of one attention head.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub output: Var,
    pub scores: ScoreMatrix,
    /// Post-softmax weights.
    pub weights: Var,
}

/// `softmax(Q·Kᵀ/√d_h + mask)·V` for one head.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AdditiveMask>,
) -> Result<HeadOutput> {
    let scores = head_scores(g, q, k)?;
    attend(g, scores, v, mask)
}

fn head_scores(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let dh = g.shape(q)[1];
    if g.shape(k)[1] != dh {
        return Err(Error::shape("scaled_dot_attention", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    g.scale(raw, 1.0 / (dh as f64).sqrt())
}

fn attend(g: &mut Graph, scores: Var, v: Var, mask: Option<&AdditiveMask>) -> Result<HeadOutput> {
    let (lq, lk) = g.value(scores).dims2()?;
    if g.shape(v)[0] != lk {
        return Err(Error::shape("scaled_dot_attention", &[lq, lk], g.shape(v)));
    }
    if let Some(m) = mask {
        if m.shape() != (lq, lk) {
            return Err(Error::shape("scaled_dot_attention", &[lq, lk], &[m.rows, m.cols]));
        }
    }
    let weights = g.softmax_rows(scores, mask.map(AdditiveMask::values))?;
    let output = g.matmul(weights, v)?;
    Ok(HeadOutput {
        output,
        scores: ScoreMatrix {
            scores: g.value(scores).clone(),
        },
        weights,
    })
}

/// Graph handles of one attention layer's projections.
///
/// Parameter names under `prefix`: `w_q`, `w_k`, `w_v` (`d_model × d_a`),
/// `w_o` (`d_a × d_model`) and `b_o` (`d_model`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn bind(g: &Graph, bound: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        let w = AttentionWeights {
            w_q: bound.var(&format!("{prefix}.w_q"))?,
            w_k: bound.var(&format!("{prefix}.w_k"))?,
            w_v: bound.var(&format!("{prefix}.w_v"))?,
            w_o: bound.var(&format!("{prefix}.w_o"))?,
            b_o: bound.var(&format!("{prefix}.b_o"))?,
            heads,
        };
        let d_a = g.shape(w.w_q)[1];
        if heads == 0 || d_a % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("{heads} heads do not divide attention width {d_a}"),
            ));
        }
        Ok(w)
    }
}

/// Per-call knobs for [`multi_head_attention`].
pub struct AttentionCtx<'a> {
    pub mode: Mode,
    pub rng: &'a mut RngStream,
    /// Receives each head's post-softmax weights, in head order.
    pub capture: Option<&'a mut Vec<Tensor>>,
}

/// Projects queries from `x_q` and keys/values from `x_kv`, attends per
/// head under `strategy`, concatenates heads and applies `W_o`.
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights,
    strategy: MaskStrategy,
    ctx: &mut AttentionCtx<'_>,
) -> Result<Var> {
    let (lq, dq) = g.value(x_q).dims2()?;
    let (lk, dk) = g.value(x_kv).dims2()?;
    if dq != dk {
        return Err(Error::shape("multi_head_attention", g.shape(x_q), g.shape(x_kv)));
    }
    let q = g.matmul(x_q, w.w_q)?;
    let k = g.matmul(x_kv, w.w_k)?;
    let v = g.matmul(x_kv, w.w_v)?;
    let d_a = g.shape(q)[1];
    let dh = d_a / w.heads;

    let window = match strategy {
        MaskStrategy::Window(spec) => {
            if lq != lk {
                return Err(Error::invalid(
                    "multi_head_attention",
                    format!("window mask needs self-attention, got {lq}×{lk}"),
                ));
            }
            Some(build_window_mask(lq, spec.back, spec.fwd)?)
        }
        _ => None,
    };

    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let scores = head_scores(g, qh, kh)?;
        let rank;
        let mask = match strategy {
            MaskStrategy::None => None,
            MaskStrategy::Window(_) => window.as_ref(),
            MaskStrategy::Rank(spec) => {
                rank = roi_rank_mask(g.value(scores), spec.k, spec.p_drop, ctx.mode, ctx.rng)?;
                Some(&rank)
            }
        };
        let head = attend(g, scores, vh, mask)?;
        if let Some(cap) = ctx.capture.as_deref_mut() {
            cap.push(g.value(head.weights).clone());
        }
        outs.push(head.output);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let projected = g.matmul(merged, w.w_o)?;
    g.add_row(projected, w.b_o)
}

/// Self-attention over time frames; accepts a window strategy.
pub fn self_attention_temporal(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    window: Option<WindowSpec>,
    ctx: &mut AttentionCtx<'_>,
) -> Result<Var> {
    let strategy = window.map_or(MaskStrategy::None, MaskStrategy::Window);
    multi_head_attention(g, x, x, w, strategy, ctx)
}

/// Self-attention over ROIs; accepts a rank strategy.
pub fn self_attention_spatial(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    rank: Option<RankSpec>,
    ctx: &mut AttentionCtx<'_>,
) -> Result<Var> {
    let strategy = rank.map_or(MaskStrategy::None, MaskStrategy::Rank);
    multi_head_attention(g, x, x, w, strategy, ctx)
}

/// Queries from `sub`, keys and values from `main`; output has `sub`'s length.
pub fn co_attention(
    g: &mut Graph,
    main: Var,
    sub: Var,
    w: &AttentionWeights,
    ctx: &mut AttentionCtx<'_>,
) -> Result<Var> {
    multi_head_attention(g, sub, main, w, MaskStrategy::None, ctx)
}

/// Post-softmax weights of every head of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedLayer {
    pub name: String,
    pub heads: Vec<Tensor>,
}

/// Writes one tab-separated matrix per `(layer, head)` as
/// `{layer}_{head}.tsv`, 17 significant digits per value.
pub fn export_scores(layers: &[CapturedLayer], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for layer in layers {
        for (h, m) in layer.heads.iter().enumerate() {
            let path = dir.join(format!("{}_{h}.tsv", layer.name));
            write_matrix_tsv(&path, m)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn write_matrix_tsv(path: &Path, m: &Tensor) -> Result<()> {
    let (r, c) = m.dims2()?;
    let mut s = String::with_capacity(r * c * 24);
    for i in 0..r {
        for j in 0..c {
            if j > 0 {
                s.push('\t');
            }
            write!(s, "{:.16e}", m.at(i, j)).unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_tsv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split('\t')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}
