use crate::error::{shape_err, NdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Projection weights of one attention block. Weights are `[d_in, d_model]`
/// (`[d_model, d_model]` for the output projection), biases `[d_model]`.
#[derive(Debug, Clone, Copy)]
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

/// `x · w + b` for a `[rows, d_in]` input.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Scaled dot-product attention with `n_heads` heads.
///
/// `query` is `[T_q, d_q]`, `key`/`value` are `[T_k, d_kv]`; `allowed` is a
/// row-major `T_q x T_k` mask where `false` entries receive zero weight.
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    p: &AttentionParams,
    n_heads: usize,
    allowed: &[bool],
) -> Result<Var> {
    multi_head_attention_with_weights(g, query, key, value, p, n_heads, allowed).map(|(o, _)| o)
}

/// Same as [`multi_head_attention`], also returning each head's `[T_q, T_k]` weights.
pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    p: &AttentionParams,
    n_heads: usize,
    allowed: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let d_model = g.shape(p.wq)[1];
    if n_heads == 0 || d_model % n_heads != 0 {
        return shape_err(
            "multi_head_attention",
            format!("model dim {d_model} not divisible by {n_heads} heads"),
        );
    }
    let (tq, tk) = (g.shape(query)[0], g.shape(key)[0]);
    if g.shape(value)[0] != tk {
        return shape_err(
            "multi_head_attention",
            format!("{tk} keys but {} values", g.shape(value)[0]),
        );
    }
    if allowed.len() != tq * tk {
        return shape_err(
            "multi_head_attention",
            format!("mask has {} entries, expected {tq} x {tk}", allowed.len()),
        );
    }
    let q = linear(g, query, p.wq, p.bq)?;
    let k = linear(g, key, p.wk, p.bk)?;
    let v = linear(g, value, p.wv, p.bv)?;
    let dh = d_model / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.t(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let w = g.masked_softmax(scores, allowed)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if n_heads == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let out = linear(g, merged, p.wo, p.bo)?;
    Ok((out, weights))
}

/// Row-major mask allowing query `i` to see keys `0..=i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|idx| idx % t <= idx / t).collect()
}

/// Mask that lets every query see every key where `key_valid` is true.
pub fn key_mask(tq: usize, key_valid: &[bool]) -> Vec<bool> {
    (0..tq).flat_map(|_| key_valid.iter().copied()).collect()
}

/// Sine/cosine position table of shape `[length, dim]`.
pub fn sinusoidal_positions(length: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(NdError::Contract(format!(
            "positional encoding dimension must be even, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(length * dim);
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![length, dim], data)
}
