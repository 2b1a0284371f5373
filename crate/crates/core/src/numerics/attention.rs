use crate::error::Result;

use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Projection weights of one attention site. Weights are `[d, d]`, biases `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head attention with queries from `q_src` (`[B, Lq, d]`) and keys
/// and values from `kv_src` (`[B, Lkv, d]`). Passing the same tensor twice
/// gives self-attention.
///
/// Returns the projected output and the attention weights `[B, h, Lq, Lkv]`.
pub fn multi_head_attention<F: Real>(
    tape: &mut Tape<F>,
    q_src: Var,
    kv_src: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Var, Tensor<F>)> {
    let q = tape.linear(q_src, params.wq, Some(params.bq))?;
    let k = tape.linear(kv_src, params.wk, Some(params.bk))?;
    let v = tape.linear(kv_src, params.wv, Some(params.bv))?;
    let mixed = tape.attention(q, k, v, heads)?;
    let probs = tape.attention_probs(mixed).expect("attention node");
    let out = tape.linear(mixed, params.wo, Some(params.bo))?;
    Ok((out, probs))
}
