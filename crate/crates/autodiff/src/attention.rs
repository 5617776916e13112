//! Multi-head scaled dot-product attention on the tape.

use rand_chacha::ChaCha8Rng;

use crate::error::AutodiffError;
use crate::graph::{Graph, Var, MASK_NEG};
use crate::ops::linear;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Attention masking mode.
///
/// Masks are applied additively to pre-softmax scores with [`MASK_NEG`], so
/// a masked position contributes exactly zero weight after normalization.
#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Full attention.
    None,
    /// Query `i` may only attend to keys `j <= i`; requires equal
    /// query/key lengths.
    Causal,
    /// `masked[j] == true` hides key position `j` from every query.
    KeyPad(Vec<bool>),
}

/// Handles to the eight projection tensors of one attention block, already
/// mounted on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Registers the parameters of one attention block under `prefix` with
/// Xavier-initialized projections and zero biases.
pub fn init_attention_params(
    params: &mut ParamSet,
    prefix: &str,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(&format!("{prefix}.{w}"), Tensor::xavier_uniform(d_model, d_model, rng));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.{b}"), Tensor::zeros(&[d_model]));
    }
}

/// Mounts the eight tensors registered by [`init_attention_params`].
pub fn mount_attention(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
) -> Result<AttnWeights, AutodiffError> {
    Ok(AttnWeights {
        wq: g.param(params, &format!("{prefix}.wq"))?,
        bq: g.param(params, &format!("{prefix}.bq"))?,
        wk: g.param(params, &format!("{prefix}.wk"))?,
        bk: g.param(params, &format!("{prefix}.bk"))?,
        wv: g.param(params, &format!("{prefix}.wv"))?,
        bv: g.param(params, &format!("{prefix}.bv"))?,
        wo: g.param(params, &format!("{prefix}.wo"))?,
        bo: g.param(params, &format!("{prefix}.bo"))?,
    })
}

/// Multi-head attention.
///
/// `query: [Tq, d]`, `key: [Tk, d]`, `value: [Tk, d]`; `d` must divide
/// evenly into `heads`. Returns the attended output `[Tq, d]` and the
/// per-head attention weight matrices (each `[Tq, Tk]`, rows summing to 1),
/// which callers use both for alignment losses and for inspection.
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    w: &AttnWeights,
    heads: usize,
    mask: &AttnMask,
) -> Result<(Var, Vec<Var>), AutodiffError> {
    let d = g.shape(query)[1];
    let tq = g.shape(query)[0];
    let tk = g.shape(key)[0];
    if g.shape(key)[1] != d || g.shape(value)[1] != d {
        return Err(AutodiffError::ShapeMismatch {
            op: "multi_head_attention",
            details: format!(
                "query {:?}, key {:?}, value {:?}",
                g.shape(query),
                g.shape(key),
                g.shape(value)
            ),
        });
    }
    if g.shape(value)[0] != tk {
        return Err(AutodiffError::ShapeMismatch {
            op: "multi_head_attention",
            details: format!("key has {} positions, value {}", tk, g.shape(value)[0]),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(AutodiffError::ContractViolation(format!(
            "model width {} not divisible into {} heads",
            d, heads
        )));
    }
    if matches!(mask, AttnMask::Causal) && tq != tk {
        return Err(AutodiffError::ContractViolation(format!(
            "causal mask needs square attention, got {}x{}",
            tq, tk
        )));
    }
    if let AttnMask::KeyPad(padded) = mask {
        if padded.len() != tk {
            return Err(AutodiffError::ShapeMismatch {
                op: "multi_head_attention",
                details: format!("{} keys but {} pad flags", tk, padded.len()),
            });
        }
        if padded.iter().all(|&p| p) {
            return Err(AutodiffError::ContractViolation(
                "every key position is masked".into(),
            ));
        }
    }

    let q_proj = linear(g, query, w.wq, w.bq)?;
    let k_proj = linear(g, key, w.wk, w.bk)?;
    let v_proj = linear(g, value, w.wv, w.bv)?;

    let mask_bias = build_mask_bias(mask, tq, tk).map(|t| g.constant(t));

    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q_proj, lo, hi)?;
        let kh = g.slice_cols(k_proj, lo, hi)?;
        let vh = g.slice_cols(v_proj, lo, hi)?;
        let kht = g.transpose(kh)?;
        let raw = g.matmul(qh, kht)?;
        let mut scores = g.scale(raw, inv_sqrt);
        if let Some(bias) = mask_bias {
            scores = g.add(scores, bias)?;
        }
        let alpha = g.softmax(scores, 1)?;
        head_weights.push(alpha);
        head_outputs.push(g.matmul(alpha, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let out = linear(g, merged, w.wo, w.bo)?;
    Ok((out, head_weights))
}

fn build_mask_bias(mask: &AttnMask, tq: usize, tk: usize) -> Option<Tensor> {
    match mask {
        AttnMask::None => None,
        AttnMask::Causal => {
            let mut data = vec![0.0; tq * tk];
            for i in 0..tq {
                for j in (i + 1)..tk {
                    data[i * tk + j] = MASK_NEG;
                }
            }
            Some(Tensor::new(vec![tq, tk], data).expect("shape"))
        }
        AttnMask::KeyPad(padded) => {
            let mut data = vec![0.0; tq * tk];
            for (j, &p) in padded.iter().enumerate() {
                if p {
                    for i in 0..tq {
                        data[i * tk + j] = MASK_NEG;
                    }
                }
            }
            Some(Tensor::new(vec![tq, tk], data).expect("shape"))
        }
    }
}
