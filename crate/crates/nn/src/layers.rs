//! The closed layer set: dense, convolution, transposed convolution, layer
//! normalization, multi-head attention, embedding and a pre-norm transformer block.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`], so one store
//! can serve many concurrent graphs read-only.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Prefixes shape errors with the layer that raised them.
fn named<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        NnError::ShapeMismatch {
            layer: op,
            dim,
            expected,
            got,
        } => NnError::ShapeMismatch {
            layer: format!("{layer} ({op})"),
            dim,
            expected,
            got,
        },
        NnError::RankMismatch { layer: op, expected, got } => NnError::RankMismatch {
            layer: format!("{layer} ({op})"),
            expected,
            got,
        },
        other => other,
    })
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, &[in_dim, out_dim], in_dim, out_dim))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// `[.., in_dim] -> [.., out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = named(&self.name, g.matmul(x, w))?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                named(&self.name, g.add_bias(y, b))
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in, fan_out),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            stride,
            pad,
        })
    }

    /// `[B, in_ch, H, W] -> [B, out_ch, H', W']`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = named(&self.name, g.conv2d(x, w, self.stride, self.pad))?;
        named(&self.name, g.add_channel_bias(y, b))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel / (stride * stride).max(1);
        let fan_out = out_ch * kernel * kernel / (stride * stride).max(1);
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[in_ch, out_ch, kernel, kernel], fan_in.max(1), fan_out.max(1)),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            stride,
            pad,
            output_pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = named(&self.name, g.conv_transpose2d(x, w, self.stride, self.pad, self.output_pad))?;
        named(&self.name, g.add_channel_bias(y, b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            name: name.to_string(),
            gamma,
            beta,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        named(&self.name, g.layer_norm(x, gamma, beta))
    }
}

/// Multi-head self-attention over `[T, d]` rows with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::ShapeMismatch {
                layer: name.to_string(),
                dim: 1,
                expected: heads.max(1) * (dim / heads.max(1)),
                got: dim,
            });
        }
        Ok(Self {
            name: name.to_string(),
            q: Dense::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Dense::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Dense::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            out: Dense::new(store, rng, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    /// Bidirectional self-attention: every position attends to every position.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = named(&self.name, g.attention(q, k, v, self.heads, false))?;
        self.out.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, count: usize, dim: usize) -> Result<Self> {
        let table = store.add(format!("{name}.table"), crate::params::normal(rng, &[count, dim], 0.02))?;
        Ok(Self {
            name: name.to_string(),
            table,
            count,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        named(&self.name, g.embedding(t, indices))
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))` with a GELU MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Dense::new(store, rng, &format!("{name}.fc1"), dim, mlp_dim, true)?,
            fc2: Dense::new(store, rng, &format!("{name}.fc2"), mlp_dim, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}
