//! Central finite-difference gradient checks against the tape's reverse pass.
//!
//! The error metric is norm-wise: `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`
//! per input or parameter tensor, probed through the scalar `sum(out * w)` with random `w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{normal, uniform};
use crate::{
    Conv2d, ConvTranspose2d, Dense, Embedding, Graph, LayerNorm, MultiHeadAttention, ParamStore, Result, Tensor,
    TransformerBlock, Var,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-4;

pub type Build<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

/// Scalar probe `sum(out * weights)` so every output element contributes.
fn probe(store: &ParamStore, inputs: &[Tensor], weights: &[f64], build: &Build) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, store, &vars)?;
    let n = g.value(out).numel();
    let w = g.input(Tensor::new(g.shape(out).to_vec(), weights.iter().cycle().take(n).copied().collect())?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, loss, vars))
}

fn loss_value(store: &ParamStore, inputs: &[Tensor], weights: &[f64], build: &Build) -> Result<f64> {
    let (g, loss, _) = probe(store, inputs, weights, build)?;
    Ok(g.value(loss).item())
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    // Analytically vanishing gradients (a key bias under softmax) leave only round-off.
    diff / scale.max(GRAD_FLOOR)
}

/// Worst relative error over every input and parameter tensor, with the name of the worst one.
pub fn check_gradients(mut store: ParamStore, mut inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, build: &Build) -> Result<(f64, String)> {
    let weights = uniform(rng, &[4096], 1.0).into_data();
    let (g, loss, vars) = probe(&store, &inputs, &weights, build)?;
    let grads = g.backward(loss)?;
    let analytic_inputs: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.of(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    store.zero_grad();
    grads.accumulate_into(&mut store);
    let analytic_params: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let mut worst = (0.0, String::new());
    for (i, analytic) in analytic_inputs.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = loss_value(&store, &inputs, &weights, build)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let down = loss_value(&store, &inputs, &weights, build)?;
            inputs[i].data_mut()[j] = orig;
            *num = (up - down) / (2.0 * STEP);
        }
        let e = relative_error(analytic, &numeric);
        if e >= worst.0 {
            worst = (e, format!("input {i}"));
        }
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.value(id).numel();
        let mut numeric = vec![0.0; n];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + STEP;
            let up = loss_value(&store, &inputs, &weights, build)?;
            store.get_mut(id).value.data_mut()[j] = orig - STEP;
            let down = loss_value(&store, &inputs, &weights, build)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            *num = (up - down) / (2.0 * STEP);
        }
        let e = relative_error(&analytic_params[k], &numeric);
        if e >= worst.0 {
            worst = (e, format!("parameter `{}`", store.get(id).name));
        }
    }
    Ok(worst)
}

/// Built-in checks, one per layer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Mlp,
    Conv,
    LayerNorm,
    Attention,
    RawAttention,
    Embedding,
    Block,
}

impl Case {
    pub const ALL: [Case; 7] = [
        Case::Mlp,
        Case::Conv,
        Case::LayerNorm,
        Case::Attention,
        Case::RawAttention,
        Case::Embedding,
        Case::Block,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::Mlp => "dense+gelu+softplus",
            Case::Conv => "conv2d+conv_transpose2d",
            Case::LayerNorm => "layer_norm+softmax",
            Case::Attention => "multi_head_attention",
            Case::RawAttention => "attention (causal and full)",
            Case::Embedding => "embedding+mask_rows+concat+slice+reshape+transpose",
            Case::Block => "transformer_block+reductions",
        }
    }
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for p in store.iter_mut() {
        p.value = normal(rng, p.value.shape(), std);
    }
}

/// Runs one built-in check at one seed.
pub fn run_case(case: Case, seed: u64) -> Result<(f64, String)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match case {
        Case::Mlp => {
            let l1 = Dense::new(&mut store, rng, "l1", 4, 5, true)?;
            let l2 = Dense::new(&mut store, rng, "l2", 5, 5, true)?;
            let l3 = Dense::new(&mut store, rng, "l3", 5, 3, false)?;
            randomize(&mut store, rng, 0.5);
            let x = normal(rng, &[2, 4], 1.0);
            check_gradients(store, vec![x], rng, &|g, s, v| {
                let h = l1.forward(g, s, v[0])?;
                let h = g.gelu(h)?;
                let h = l2.forward(g, s, h)?;
                let h = g.softplus(h)?;
                l3.forward(g, s, h)
            })
        }
        Case::Conv => {
            let c = Conv2d::new(&mut store, rng, "conv", 2, 3, 3, 2, 1)?;
            let t = ConvTranspose2d::new(&mut store, rng, "convt", 3, 2, 3, 2, 1, 1)?;
            randomize(&mut store, rng, 0.5);
            let x = normal(rng, &[1, 2, 6, 5], 1.0);
            check_gradients(store, vec![x], rng, &|g, s, v| {
                let h = c.forward(g, s, v[0])?;
                let h = g.gelu(h)?;
                t.forward(g, s, h)
            })
        }
        Case::LayerNorm => {
            let ln = LayerNorm::new(&mut store, "ln", 6)?;
            randomize(&mut store, rng, 1.0);
            let x = normal(rng, &[3, 6], 2.0);
            check_gradients(store, vec![x], rng, &|g, s, v| {
                let h = ln.forward(g, s, v[0])?;
                g.softmax(h)
            })
        }
        Case::Attention => {
            let attn = MultiHeadAttention::new(&mut store, rng, "attn", 6, 2)?;
            randomize(&mut store, rng, 0.5);
            let x = normal(rng, &[4, 6], 1.0);
            check_gradients(store, vec![x], rng, &|g, s, v| attn.forward(g, s, v[0]))
        }
        Case::RawAttention => {
            let q = normal(rng, &[3, 4], 1.0);
            let k = normal(rng, &[3, 4], 1.0);
            let v = normal(rng, &[3, 4], 1.0);
            check_gradients(store, vec![q, k, v], rng, &|g, _, v| {
                let a = g.attention(v[0], v[1], v[2], 2, true)?;
                let b = g.attention(v[0], v[1], v[2], 1, false)?;
                g.add(a, b)
            })
        }
        Case::Embedding => {
            let emb = Embedding::new(&mut store, rng, "emb", 3, 4)?;
            let tok = store.add("mask_token", normal(rng, &[4], 1.0))?;
            let x = normal(rng, &[5, 4], 1.0);
            let mask: Vec<bool> = (0..5).map(|i| (i + rng.random_range(0..2)) % 2 == 0).collect();
            check_gradients(store, vec![x], rng, &|g, s, v| {
                let t = g.param(s, tok);
                let m = g.mask_rows(v[0], t, &mask)?;
                let e = emb.forward(g, s, &[0, 2, 1, 2, 0])?;
                let both = g.add(m, e)?;
                let cat = g.concat_rows(&[both, v[0]])?;
                let sl = g.slice_rows(cat, 2, 6)?;
                let r = g.reshape(sl, &[4, 6])?;
                let r = g.transpose(r)?;
                g.scale(r, 0.7)
            })
        }
        Case::Block => {
            let block = TransformerBlock::new(&mut store, rng, "blk", 4, 2, 8)?;
            let bias = store.add("bias", normal(rng, &[2], 1.0))?;
            randomize(&mut store, rng, 0.5);
            let x = normal(rng, &[3, 4], 1.0);
            let y = normal(rng, &[1, 2, 2, 2], 1.0);
            check_gradients(store, vec![x, y], rng, &|g, s, v| {
                let h = block.forward(g, s, v[0])?;
                let b = g.param(s, bias);
                let c = g.add_channel_bias(v[1], b)?;
                let c = g.sub(c, v[1])?;
                let c = g.mul(c, v[1])?;
                let c = g.reshape(c, &[2, 4])?;
                let cat = g.concat_rows(&[h, c])?;
                let m = g.mean(cat)?;
                let m = g.reshape(m, &[1, 1])?;
                let sq = g.mul(m, m)?;
                let total = g.sum(cat)?;
                let total = g.reshape(total, &[1, 1])?;
                g.concat_rows(&[sq, total, m])
            })
        }
    }
}
