//! Finite-difference checks of every op and layer family over 100 seeds.

use mdvc_nn::gradcheck::{run_case, Case, TOLERANCE};

const SEEDS: u64 = 100;

fn check(case: Case) {
    for seed in 0..SEEDS {
        let (e, worst) = run_case(case, seed).unwrap();
        assert!(e < TOLERANCE, "{} seed {seed}: {worst} relative error {e:e}", case.name());
    }
}

#[test]
fn dense_mlp() {
    check(Case::Mlp);
}

#[test]
fn convolution_and_transposed_convolution() {
    check(Case::Conv);
}

#[test]
fn layer_norm_and_softmax() {
    check(Case::LayerNorm);
}

#[test]
fn multi_head_attention() {
    check(Case::Attention);
}

#[test]
fn raw_attention_inputs_including_causal() {
    check(Case::RawAttention);
}

#[test]
fn embedding_mask_concat_slice() {
    check(Case::Embedding);
}

#[test]
fn transformer_block_and_reductions() {
    check(Case::Block);
}
