//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass as a
//! node holding its value, its inputs, and whatever the backward rule
//! needs. [`Graph::backward`] walks the tape once in reverse, summing
//! contributions when a node feeds several consumers.
//!
//! Every forward primitive checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating it. Masked softmax accepts
//! `-inf` only through its explicit additive-mask argument.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm, MatView, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool1d {
        x: Var,
        window: usize,
        stride: usize,
    },
    MeanRows(Var),
    MeanLast(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    Reshape(Var),
    Bce {
        p: Var,
        label: f64,
        clamped: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax_rows",
            Op::Dropout { .. } => "dropout",
            Op::Conv1d { .. } => "conv1d",
            Op::AvgPool1d { .. } => "avg_pool1d",
            Op::MeanRows(..) => "mean_rows",
            Op::MeanLast(..) => "mean_last",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Bce { .. } => "bce",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::MeanRows(a)
            | Op::MeanLast(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Dropout { x, .. } | Op::AvgPool1d { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ConcatCols(vs) | Op::Concat(vs) => vs.clone(),
            Op::Bce { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Geometry of a batched 1-D convolution `[N, C_in, L] -> [N, C_out, L_out]`.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    len_out: usize,
    squeeze: bool,
}

impl ConvGeom {
    fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (n, c_in, len, squeeze) = match *x_shape {
            [c, l] => (1, c, l, true),
            [n, c, l] => (n, c, l, false),
            _ => return Err(Error::invalid("conv1d", format!("input shape {x_shape:?}"))),
        };
        let &[c_out, wc_in, k] = w_shape else {
            return Err(Error::invalid("conv1d", format!("kernel shape {w_shape:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1d", x_shape, w_shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be at least 1"));
        }
        let (len_out, pad_left) = match padding {
            Padding::Valid => {
                if k > len {
                    return Err(Error::invalid(
                        "conv1d",
                        format!("kernel {k} longer than input {len}"),
                    ));
                }
                ((len - k) / stride + 1, 0)
            }
            Padding::Same => {
                let len_out = len.div_ceil(stride);
                let pad_total = ((len_out - 1) * stride + k).saturating_sub(len);
                if k > len + pad_total {
                    return Err(Error::invalid(
                        "conv1d",
                        format!("kernel {k} longer than padded input {}", len + pad_total),
                    ));
                }
                (len_out, pad_total / 2)
            }
        };
        Ok(ConvGeom {
            n,
            c_in,
            len,
            c_out,
            k,
            stride,
            pad_left,
            len_out,
            squeeze,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.squeeze {
            vec![self.c_out, self.len_out]
        } else {
            vec![self.n, self.c_out, self.len_out]
        }
    }

    /// Input position read by output step `t` at tap `k`, if inside the signal.
    fn src(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k).checked_sub(self.pad_left)?;
        (pos < self.len).then_some(pos)
    }

    /// Unfolds `x` into `[N·L_out, C_in·K]` patches.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let width = self.c_in * self.k;
        let mut cols = vec![0.0; self.n * self.len_out * width];
        for n in 0..self.n {
            for t in 0..self.len_out {
                let row = &mut cols[(n * self.len_out + t) * width..][..width];
                for c in 0..self.c_in {
                    let base = (n * self.c_in + c) * self.len;
                    for k in 0..self.k {
                        if let Some(p) = self.src(t, k) {
                            row[c * self.k + k] = x[base + p];
                        }
                    }
                }
            }
        }
        cols
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatView::new(self.value(a).data(), m, k),
            MatView::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b))
    }

    /// Adds a length-`d` vector to every row of a `[..., d]` tensor.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap();
        if self.shape(b) != [d] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a))
    }

    /// Normalizes over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax of `a + mask`, where `mask` holds `0` or `-inf`.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows", &[r, c], &[m.len()]));
            }
        }
        let mut out = self.value(a).data().to_vec();
        if let Some(m) = mask {
            out.iter_mut().zip(m).for_each(|(x, mv)| *x += mv);
        }
        for (i, row) in out.chunks_mut(c).enumerate() {
            softmax_in_place(row).map_err(|_| Error::DegenerateMask { row: i })?;
        }
        self.push(vec![r, c], out, Op::Softmax(a))
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &scale, |a, s| a * s);
        self.push(self.shape(x).to_vec(), data, Op::Dropout { x, scale })
    }

    /// Cross-correlation along the last axis.
    ///
    /// `x` is `[C_in, L]` or a batch `[N, C_in, L]`; `w` is `[C_out, C_in, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv1d", self.shape(w), self.shape(b)));
            }
        }
        let cols = geom.im2col(self.value(x).data());
        let width = geom.c_in * geom.k;
        let rows = geom.n * geom.len_out;
        // [N·L_out, C_out]
        let mut prod = vec![0.0; rows * geom.c_out];
        gemm(
            MatView::new(&cols, rows, width),
            MatView::new(self.value(w).data(), geom.c_out, width).t(),
            0.0,
            &mut prod,
        );
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; geom.n * geom.c_out * geom.len_out];
        for n in 0..geom.n {
            for t in 0..geom.len_out {
                let src = &prod[(n * geom.len_out + t) * geom.c_out..][..geom.c_out];
                for (o, &v) in src.iter().enumerate() {
                    out[(n * geom.c_out + o) * geom.len_out + t] =
                        v + bias.map_or(0.0, |bb| bb[o]);
                }
            }
        }
        self.push(geom.out_shape(), out, Op::Conv1d { x, w, b, geom })
    }

    /// Mean over non-overlapping-or-strided windows of the last axis;
    /// a trailing remainder shorter than `window` is dropped.
    pub fn avg_pool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        if window == 0 || stride == 0 || window > len {
            return Err(Error::invalid(
                "avg_pool1d",
                format!("window {window}, stride {stride} on length {len}"),
            ));
        }
        let len_out = (len - window) / stride + 1;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(len)
            .flat_map(|ch| {
                (0..len_out).map(move |t| {
                    ch[t * stride..t * stride + window].iter().sum::<f64>() / window as f64
                })
            })
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len_out;
        self.push(out_shape, data, Op::AvgPool1d { x, window, stride })
    }

    /// Column means of a matrix: `[R, C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(vec![c], out, Op::MeanRows(x))
    }

    /// Mean over the last axis: `[..., L] -> [...]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(len)
            .map(|ch| ch.iter().sum::<f64>() / len as f64)
            .collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        self.push(out_shape, out, Op::MeanLast(x))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(Error::invalid("slice_cols", format!("[{start}, {end}) of {c} columns")));
        }
        let w = end - start;
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.push(vec![r, w], data, Op::SliceCols { x, start })
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![r, total], data, Op::ConcatCols(parts.to_vec()))
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        self.push(vec![data.len()], data, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x))
    }

    /// Binary cross-entropy of a single probability, clamped to
    /// `[1e-7, 1 - 1e-7]` before the log.
    pub fn bce(&mut self, p: Var, label: f64) -> Result<Var> {
        if self.value(p).len() != 1 {
            return Err(Error::invalid("bce", format!("expected one probability, got {:?}", self.shape(p))));
        }
        let raw = self.value(p).data()[0];
        let clamped = !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&raw);
        let loss = bce_value(raw, label);
        self.push(vec![1], vec![loss], Op::Bce { p, label, clamped })
    }

    /// Reverse pass from a scalar `loss` with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass with seed gradient `seed` (e.g. `1/batch` for means).
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let gv = MatView::new(g, m, n);
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, m * k);
                    gemm(gv, MatView::new(val(*b), k, n).t(), 1.0, buf);
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, k * n);
                    gemm(MatView::new(val(*a), m, k).t(), gv, 1.0, buf);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (r, c) = node.value.dims2().unwrap();
                    let buf = grad_buf(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(grad_buf(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    add_into(grad_buf(grads, *a, g.len()), g);
                }
                if self.needs(*b) {
                    let d = self.value(*b).len();
                    let buf = grad_buf(grads, *b, d);
                    for row in g.chunks(d) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = val(*b);
                    let buf = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
                if self.needs(*b) {
                    let other = val(*a);
                    let buf = grad_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi * c);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).len();
                    grad_buf(grads, *a, n).iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = val(*a);
                    let buf = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(x[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = node.value.data();
                    let buf = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gam = val(*gamma);
                if self.needs(*gamma) {
                    let buf = grad_buf(grads, *gamma, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = grad_buf(grads, *beta, d);
                    for grow in g.chunks(d) {
                        add_into(buf, grow);
                    }
                }
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, g.len());
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = (0..d).map(|j| grow[j] * gam[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[r * d + j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let buf = grad_buf(grads, *a, g.len());
                    for ((brow, yrow), grow) in buf.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * scale[i];
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let rows = geom.n * geom.len_out;
                let width = geom.c_in * geom.k;
                // Output gradient rearranged to [N·L_out, C_out].
                let mut gt = vec![0.0; rows * geom.c_out];
                for n in 0..geom.n {
                    for o in 0..geom.c_out {
                        for t in 0..geom.len_out {
                            gt[(n * geom.len_out + t) * geom.c_out + o] =
                                g[(n * geom.c_out + o) * geom.len_out + t];
                        }
                    }
                }
                let gview = MatView::new(&gt, rows, geom.c_out);
                if let Some(b) = b {
                    if self.needs(*b) {
                        let buf = grad_buf(grads, *b, geom.c_out);
                        for row in gt.chunks(geom.c_out) {
                            add_into(buf, row);
                        }
                    }
                }
                if self.needs(*w) {
                    let cols = geom.im2col(val(*x));
                    let buf = grad_buf(grads, *w, geom.c_out * width);
                    gemm(gview.t(), MatView::new(&cols, rows, width), 1.0, buf);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * width];
                    gemm(gview, MatView::new(val(*w), geom.c_out, width), 0.0, &mut dcols);
                    let buf = grad_buf(grads, *x, geom.n * geom.c_in * geom.len);
                    for n in 0..geom.n {
                        for t in 0..geom.len_out {
                            let row = &dcols[(n * geom.len_out + t) * width..][..width];
                            for c in 0..geom.c_in {
                                let base = (n * geom.c_in + c) * geom.len;
                                for k in 0..geom.k {
                                    if let Some(p) = geom.src(t, k) {
                                        buf[base + p] += row[c * geom.k + k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool1d { x, window, stride } => {
                if self.needs(*x) {
                    let len = *self.shape(*x).last().unwrap();
                    let len_out = *node.value.shape().last().unwrap();
                    let inv = 1.0 / *window as f64;
                    let buf = grad_buf(grads, *x, self.value(*x).len());
                    for (brow, grow) in buf.chunks_mut(len).zip(g.chunks(len_out)) {
                        for (t, gv) in grow.iter().enumerate() {
                            for b in &mut brow[t * stride..t * stride + window] {
                                *b += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    let buf = grad_buf(grads, *x, r * c);
                    for brow in buf.chunks_mut(c) {
                        for j in 0..c {
                            brow[j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::MeanLast(x) => {
                if self.needs(*x) {
                    let len = *self.shape(*x).last().unwrap();
                    let buf = grad_buf(grads, *x, self.value(*x).len());
                    for (brow, gv) in buf.chunks_mut(len).zip(g) {
                        brow.iter_mut().for_each(|b| *b += gv / len as f64);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    let w = node.value.shape()[1];
                    let buf = grad_buf(grads, *x, r * c);
                    for i in 0..r {
                        add_into(&mut buf[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let buf = grad_buf(grads, p, r * w);
                        for i in 0..r {
                            add_into(&mut buf[i * w..(i + 1) * w], &g[i * total + offset..][..w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        add_into(grad_buf(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(grad_buf(grads, *x, g.len()), g);
                }
            }
            Op::Bce { p, label, clamped } => {
                if self.needs(*p) && !clamped {
                    let pv = val(*p)[0];
                    let d = -label / pv + (1.0 - label) / (1.0 - pv);
                    grad_buf(grads, *p, 1)[0] += g[0] * d;
                }
            }
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) const BCE_CLAMP: f64 = 1e-7;

/// `-[y·ln p + (1-y)·ln(1-p)]` with `p` clamped to `[1e-7, 1-1e-7]`.
pub fn bce_value(p: f64, label: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of one row; `-inf` entries get weight 0.
/// Fails when every entry is `-inf`.
fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
    Ok(())
}

/// Row-wise softmax over a matrix whose entries are finite or `-inf`.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (_, c) = m.dims2()?;
    if m.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = m.clone();
    for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
        softmax_in_place(row).map_err(|_| Error::DegenerateMask { row: i })?;
    }
    Ok(out)
}
