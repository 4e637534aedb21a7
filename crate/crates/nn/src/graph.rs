//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are only ever
//! appended after their inputs, so the node list is already a topological
//! order and [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::{NnError, Result};
use crate::gemm::{gemm, MatView};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A fused op whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. Entries may be `None` for inputs that need no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    MatMul { x: Var, w: Var },
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, out_ch: usize },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, in_ch: usize },
    Embedding { table: Var, indices: Vec<usize> },
    MaskRows { x: Var, token: Var, mask: Vec<bool> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SteRound(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::MatMul { .. } => "matmul",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Embedding { .. } => "embedding",
            Op::MaskRows { .. } => "mask_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SteRound(_) => "ste_round",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let acc = store.get_mut(id).grad.data_mut();
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(layer: &str, dim: usize, expected: usize, got: usize) -> NnError {
    NnError::ShapeMismatch {
        layer: layer.to_string(),
        dim,
        expected,
        got,
    }
}

fn rank_err(layer: &str, expected: usize, got: &[usize]) -> NnError {
    NnError::RankMismatch {
        layer: layer.to_string(),
        expected,
        got: got.to_vec(),
    }
}

fn same_shape(layer: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(rank_err(layer, a.rank(), b.shape()));
    }
    for (d, (&x, &y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(shape_err(layer, d, x, y));
        }
    }
    Ok(())
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFiniteValue(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softplus(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SteRound(x)
            | Op::SliceRows { x, .. } => self.rg(*x),
            Op::AddBias { x, bias } | Op::AddChannelBias { x, bias } => self.rg(*x) || self.rg(*bias),
            Op::MatMul { x, w } | Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => {
                self.rg(*x) || self.rg(*w)
            }
            Op::LayerNorm { x, gamma, beta, .. } => self.rg(*x) || self.rg(*gamma) || self.rg(*beta),
            Op::Attention { q, k, v, .. } => self.rg(*q) || self.rg(*k) || self.rg(*v),
            Op::Embedding { table, .. } => self.rg(*table),
            Op::MaskRows { x, token, .. } => self.rg(*x) || self.rg(*token),
            Op::ConcatRows(xs) => xs.iter().any(|x| self.rg(*x)),
            Op::Custom { inputs, .. } => inputs.iter().any(|x| self.rg(*x)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked even though it is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Scale(x, s))
    }

    /// Adds a `[d]` bias to every row of an `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        let b = self.value(bias);
        if b.rank() != 1 {
            return Err(rank_err("add_bias", 1, b.shape()));
        }
        if b.numel() != cols {
            return Err(shape_err("add_bias", 0, cols, b.numel()));
        }
        let mut t = self.value(x).clone();
        let bd = self.value(bias).data();
        for row in t.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
        }
        self.push(t, Op::AddBias { x, bias })
    }

    /// Adds a `[C]` bias to each channel of a `[B, C, H, W]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(rank_err("add_channel_bias", 4, &xs));
        }
        if self.value(bias).numel() != xs[1] {
            return Err(shape_err("add_channel_bias", 1, xs[1], self.value(bias).numel()));
        }
        let plane = xs[2] * xs[3];
        let mut t = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            let b = bd[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(t, Op::AddChannelBias { x, bias })
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, k) = self.value(x).rows_cols();
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(rank_err("matmul", 2, ws));
        }
        if ws[0] != k {
            return Err(shape_err("matmul", self.value(x).rank().saturating_sub(1), ws[0], k));
        }
        let n = ws[1];
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            1.0,
            self.value(x).data(),
            MatView::row_major(k),
            self.value(w).data(),
            MatView::row_major(n),
            0.0,
            &mut out,
            MatView::row_major(n),
        );
        let mut shape = self.shape(x).to_vec();
        match shape.last_mut() {
            Some(last) => *last = n,
            None => shape.push(n),
        }
        self.push(Tensor::new(shape, out)?, Op::MatMul { x, w })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * std_normal_cdf(v))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Softplus(x))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        let mut t = self.value(x).clone();
        softmax_rows(t.data_mut(), cols);
        self.push(t, Op::Softmax(x))
    }

    /// Layer normalization over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        for (name, p) in [("layer_norm.gamma", gamma), ("layer_norm.beta", beta)] {
            if self.value(p).numel() != d {
                return Err(shape_err(name, 0, d, self.value(p).numel()));
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, rstd })
    }

    /// Multi-head scaled dot-product attention over `[T, d]` query/key/value rows.
    /// With `causal == false` every query attends to every key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        for s in [&qs, &ks, &vs] {
            if s.len() != 2 {
                return Err(rank_err("attention", 2, s));
            }
        }
        let (tq, d) = (qs[0], qs[1]);
        let tk = ks[0];
        if ks[1] != d {
            return Err(shape_err("attention.key", 1, d, ks[1]));
        }
        if vs[0] != tk {
            return Err(shape_err("attention.value", 0, tk, vs[0]));
        }
        if vs[1] != d {
            return Err(shape_err("attention.value", 1, d, vs[1]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention.heads", 1, heads.max(1) * (d / heads.max(1)).max(1), d));
        }
        if causal && tq != tk {
            return Err(shape_err("attention.causal", 0, tq, tk));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                tq,
                dh,
                tk,
                scale,
                qd,
                MatView::row_major(d).at(h * dh),
                kd,
                MatView::transposed(d).at(h * dh),
                0.0,
                p,
                MatView::row_major(tk),
            );
            if causal {
                for i in 0..tq {
                    for j in i + 1..tk {
                        p[i * tk + j] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(p, tk);
            gemm(
                tq,
                tk,
                dh,
                1.0,
                p,
                MatView::row_major(tk),
                vd,
                MatView::row_major(d).at(h * dh),
                0.0,
                &mut out,
                MatView::row_major(d).at(h * dh),
            );
        }
        let t = Tensor::new(vec![tq, d], out)?;
        self.push(t, Op::Attention { q, k, v, heads, probs })
    }

    /// Attention weights of the most recent attention node `out` (for inspection and tests).
    pub fn attention_weights(&self, out: Var) -> Option<&[f64]> {
        match &self.nodes[out.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2D convolution of `[B, C, H, W]` by `[O, C, k, k]` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(rank_err("conv2d", 4, &xs));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(rank_err("conv2d.weight", 4, &ws));
        }
        if ws[1] != xs[1] {
            return Err(shape_err("conv2d", 1, ws[1], xs[1]));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d", 2, ws[2], xs[2] + 2 * pad))?;
        let (batch, out_ch) = (xs[0], ws[0]);
        let in_size = xs[1] * xs[2] * xs[3];
        let out_plane = geom.col_cols();
        let mut cols = vec![0.0; geom.col_rows() * out_plane];
        let mut out = vec![0.0; batch * out_ch * out_plane];
        for b in 0..batch {
            im2col(&self.value(x).data()[b * in_size..(b + 1) * in_size], &geom, &mut cols);
            gemm(
                out_ch,
                geom.col_rows(),
                out_plane,
                1.0,
                self.value(w).data(),
                MatView::row_major(geom.col_rows()),
                &cols,
                MatView::row_major(out_plane),
                0.0,
                &mut out[b * out_ch * out_plane..(b + 1) * out_ch * out_plane],
                MatView::row_major(out_plane),
            );
        }
        let t = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        self.push(t, Op::Conv2d { x, w, geom, out_ch })
    }

    /// Transposed convolution of `[B, Cin, H, W]` by `[Cin, Cout, k, k]`; the
    /// output has spatial size `(H-1)*stride - 2*pad + k + output_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, output_pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(rank_err("conv_transpose2d", 4, &xs));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(rank_err("conv_transpose2d.weight", 4, &ws));
        }
        if ws[0] != xs[1] {
            return Err(shape_err("conv_transpose2d", 1, ws[0], xs[1]));
        }
        let k = ws[2];
        let (batch, in_ch, out_ch) = (xs[0], xs[1], ws[1]);
        let out_h = ((xs[2] - 1) * stride + k + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d", 2, 2 * pad, (xs[2] - 1) * stride + k))?;
        let out_w = ((xs[3] - 1) * stride + k + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d", 3, 2 * pad, (xs[3] - 1) * stride + k))?;
        // The forward op is the adjoint of a convolution from the output grid to the input grid.
        let geom = ConvGeom::new(out_ch, out_h, out_w, k, stride, pad)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| shape_err("conv_transpose2d", 2, xs[2], out_h))?;
        let in_plane = xs[2] * xs[3];
        let out_size = out_ch * out_h * out_w;
        let mut cols = vec![0.0; geom.col_rows() * in_plane];
        let mut out = vec![0.0; batch * out_size];
        for b in 0..batch {
            gemm(
                geom.col_rows(),
                in_ch,
                in_plane,
                1.0,
                self.value(w).data(),
                MatView::transposed(geom.col_rows()),
                &self.value(x).data()[b * in_ch * in_plane..(b + 1) * in_ch * in_plane],
                MatView::row_major(in_plane),
                0.0,
                &mut cols,
                MatView::row_major(in_plane),
            );
            col2im(&cols, &geom, &mut out[b * out_size..(b + 1) * out_size]);
        }
        let t = Tensor::new(vec![batch, out_ch, out_h, out_w], out)?;
        self.push(t, Op::ConvTranspose2d { x, w, geom, in_ch })
    }

    /// Row lookup into a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(rank_err("embedding", 2, &ts));
        }
        let d = ts[1];
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= ts[0] {
                return Err(shape_err("embedding", 0, ts[0], i));
            }
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Replaces row `i` of `[n, d]` by the `[d]` vector `token` wherever `mask[i]` is set.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(rank_err("mask_rows", 2, &xs));
        }
        if mask.len() != xs[0] {
            return Err(shape_err("mask_rows", 0, xs[0], mask.len()));
        }
        if self.value(token).numel() != xs[1] {
            return Err(shape_err("mask_rows.token", 0, xs[1], self.value(token).numel()));
        }
        let d = xs[1];
        let mut t = self.value(x).clone();
        let tok = self.value(token).data().to_vec();
        for (row, &m) in t.data_mut().chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(&tok);
            }
        }
        self.push(
            t,
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
        )
    }

    /// Stacks `[n_i, d]` tensors along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let d = match xs.first() {
            Some(&x) => self.value(x).rows_cols().1,
            None => return Err(rank_err("concat_rows", 2, &[])),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.value(x).rows_cols();
            if c != d {
                return Err(shape_err("concat_rows", 1, d, c));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        self.push(t, Op::ConcatRows(xs.to_vec()))
    }

    /// Rows `start..start+len` of an `[n, d]` tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if start + len > rows {
            return Err(shape_err("slice_rows", 0, rows, start + len));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(vec![len, d], data)?;
        self.push(t, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    /// `[a, b] -> [b, a]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(rank_err("transpose", 2, &xs));
        }
        let (a, b) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; a * b];
        for i in 0..a {
            for j in 0..b {
                out[j * a + i] = src[i * b + j];
            }
        }
        self.push(Tensor::new(vec![b, a], out)?, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Round-to-nearest-even forward, identity backward.
    pub fn ste_round(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.round_ties_even()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::SteRound(x))
    }

    /// Records a fused op whose forward `output` the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
            if let Op::Param(id) = node.op {
                params.push((id, i));
            }
            grads[i] = Some(gout);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteValue("backward".to_string()));
            }
        }
        Ok(Gradients { grads, params })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, *a, val(*a).numel(), |g| add_into(g, gout));
                }
                if wants(*b) {
                    acc(grads, *b, val(*b).numel(), |g| add_into(g, gout));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, val(*a).numel(), |g| add_into(g, gout));
                }
                if wants(*b) {
                    acc(grads, *b, val(*b).numel(), |g| {
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(grads, *a, av.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * bv[i];
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, bv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                acc(grads, *x, gout.len(), |g| {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += s * b)
                });
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    acc(grads, *x, gout.len(), |g| add_into(g, gout));
                }
                if wants(*bias) {
                    let d = val(*bias).numel();
                    acc(grads, *bias, d, |g| {
                        for row in gout.chunks(d) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::AddChannelBias { x, bias } => {
                if wants(*x) {
                    acc(grads, *x, gout.len(), |g| add_into(g, gout));
                }
                if wants(*bias) {
                    let s = val(*x).shape();
                    let (c, plane) = (s[1], s[2] * s[3]);
                    acc(grads, *bias, c, |g| {
                        for (i, chunk) in gout.chunks(plane).enumerate() {
                            g[i % c] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MatMul { x, w } => {
                let (rows, k) = val(*x).rows_cols();
                let n = val(*w).shape()[1];
                if wants(*x) {
                    acc(grads, *x, rows * k, |g| {
                        gemm(
                            rows,
                            n,
                            k,
                            1.0,
                            gout,
                            MatView::row_major(n),
                            val(*w).data(),
                            MatView::transposed(n),
                            1.0,
                            g,
                            MatView::row_major(k),
                        )
                    });
                }
                if wants(*w) {
                    acc(grads, *w, k * n, |g| {
                        gemm(
                            k,
                            rows,
                            n,
                            1.0,
                            val(*x).data(),
                            MatView::transposed(k),
                            gout,
                            MatView::row_major(n),
                            1.0,
                            g,
                            MatView::row_major(n),
                        )
                    });
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(grads, *x, xv.len(), |g| {
                    for i in 0..g.len() {
                        let v = xv[i];
                        g[i] += gout[i] * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x).data();
                acc(grads, *x, xv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                acc(grads, *x, y.len(), |g| {
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            g[r * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (rows, d) = val(*x).rows_cols();
                let xv = val(*x).data();
                let gam = val(*gamma).data();
                let mut xhat = vec![0.0; rows * d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * rstd[r];
                    }
                }
                if wants(*gamma) {
                    acc(grads, *gamma, d, |g| {
                        for i in 0..rows * d {
                            g[i % d] += gout[i] * xhat[i];
                        }
                    });
                }
                if wants(*beta) {
                    acc(grads, *beta, d, |g| {
                        for i in 0..rows * d {
                            g[i % d] += gout[i];
                        }
                    });
                }
                if wants(*x) {
                    acc(grads, *x, rows * d, |g| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                dxhat[j] = gout[r * d + j] * gam[j];
                                m1 += dxhat[j];
                                m2 += dxhat[j] * xhat[r * d + j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                g[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gout, grads);
            }
            Op::Conv2d { x, w, geom, out_ch } => {
                let xs = val(*x).shape();
                let (batch, in_size) = (xs[0], xs[1] * xs[2] * xs[3]);
                let (crow, ccol) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![0.0; crow * ccol];
                let mut dw = vec![0.0; out_ch * crow];
                let mut dx = vec![0.0; if wants(*x) { batch * in_size } else { 0 }];
                for b in 0..batch {
                    let gb = &gout[b * out_ch * ccol..(b + 1) * out_ch * ccol];
                    if wants(*w) {
                        im2col(&val(*x).data()[b * in_size..(b + 1) * in_size], geom, &mut cols);
                        gemm(*out_ch, ccol, crow, 1.0, gb, MatView::row_major(ccol), &cols, MatView::transposed(ccol), 1.0, &mut dw, MatView::row_major(crow));
                    }
                    if wants(*x) {
                        gemm(crow, *out_ch, ccol, 1.0, val(*w).data(), MatView::transposed(crow), gb, MatView::row_major(ccol), 0.0, &mut cols, MatView::row_major(ccol));
                        col2im(&cols, geom, &mut dx[b * in_size..(b + 1) * in_size]);
                    }
                }
                if wants(*w) {
                    acc(grads, *w, dw.len(), |g| add_into(g, &dw));
                }
                if wants(*x) {
                    acc(grads, *x, dx.len(), |g| add_into(g, &dx));
                }
            }
            Op::ConvTranspose2d { x, w, geom, in_ch } => {
                let xs = val(*x).shape();
                let (batch, in_plane) = (xs[0], xs[2] * xs[3]);
                let out_size = geom.channels * geom.in_h * geom.in_w;
                let crow = geom.col_rows();
                let mut cols = vec![0.0; crow * in_plane];
                let mut dw = vec![0.0; in_ch * crow];
                let mut dx = vec![0.0; if wants(*x) { batch * in_ch * in_plane } else { 0 }];
                for b in 0..batch {
                    im2col(&gout[b * out_size..(b + 1) * out_size], geom, &mut cols);
                    if wants(*x) {
                        gemm(*in_ch, crow, in_plane, 1.0, val(*w).data(), MatView::row_major(crow), &cols, MatView::row_major(in_plane), 0.0, &mut dx[b * in_ch * in_plane..(b + 1) * in_ch * in_plane], MatView::row_major(in_plane));
                    }
                    if wants(*w) {
                        let xb = &val(*x).data()[b * in_ch * in_plane..(b + 1) * in_ch * in_plane];
                        gemm(*in_ch, in_plane, crow, 1.0, xb, MatView::row_major(in_plane), &cols, MatView::transposed(in_plane), 1.0, &mut dw, MatView::row_major(crow));
                    }
                }
                if wants(*w) {
                    acc(grads, *w, dw.len(), |g| add_into(g, &dw));
                }
                if wants(*x) {
                    acc(grads, *x, dx.len(), |g| add_into(g, &dx));
                }
            }
            Op::Embedding { table, indices } => {
                let d = val(*table).shape()[1];
                acc(grads, *table, val(*table).numel(), |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskRows { x, token, mask } => {
                let d = val(*token).numel();
                if wants(*x) {
                    acc(grads, *x, gout.len(), |g| {
                        for (r, &m) in mask.iter().enumerate() {
                            if !m {
                                add_into(&mut g[r * d..(r + 1) * d], &gout[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
                if wants(*token) {
                    acc(grads, *token, d, |g| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                add_into(g, &gout[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).numel();
                    if wants(x) {
                        acc(grads, x, n, |g| add_into(g, &gout[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, d) = val(*x).rows_cols();
                let n = val(*x).numel();
                acc(grads, *x, n, |g| add_into(&mut g[start * d..start * d + gout.len()], gout));
            }
            Op::Reshape(x) | Op::SteRound(x) => {
                acc(grads, *x, gout.len(), |g| add_into(g, gout));
            }
            Op::Transpose(x) => {
                let xs = val(*x).shape();
                let (a, b) = (xs[0], xs[1]);
                acc(grads, *x, a * b, |g| {
                    for i in 0..a {
                        for j in 0..b {
                            g[i * b + j] += gout[j * a + i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                acc(grads, *x, n, |g| g.iter_mut().for_each(|v| *v += gout[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let s = gout[0] / n.max(1) as f64;
                acc(grads, *x, n, |g| g.iter_mut().for_each(|v| *v += s));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, gout);
                for (&x, gx) in inputs.iter().zip(gs) {
                    if let (true, Some(gx)) = (wants(x), gx) {
                        acc(grads, x, gx.len(), |g| add_into(g, &gx));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[f64], gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.shape()[0], qv.shape()[1]);
        let tk = kv.shape()[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq * d];
        let mut dk = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let mut ds = vec![0.0; tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            let col = MatView::row_major(d).at(h * dh);
            // dV_h = P^T dO_h
            gemm(tk, tq, dh, 1.0, p, MatView::transposed(tk), gout, col, 0.0, &mut dv, col);
            // dP = dO_h V_h^T
            gemm(tq, dh, tk, 1.0, gout, col, vv.data(), MatView::transposed(d).at(h * dh), 0.0, &mut ds, MatView::row_major(tk));
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut ds[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..tk {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            gemm(tq, tk, dh, scale, &ds, MatView::row_major(tk), kv.data(), col, 0.0, &mut dq, col);
            gemm(tk, tq, dh, scale, &ds, MatView::transposed(tk), qv.data(), col, 0.0, &mut dk, col);
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                acc(grads, var, g.len(), |acc_g| add_into(acc_g, &g));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn acc(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}
