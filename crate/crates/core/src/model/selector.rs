//! Answer selector: question-aware entity representations via cross
//! attention and per-question entity extraction probabilities.

use fes_autodiff::{
    mount_attention, multi_head_attention, AttnMask, Graph, ParamSet, Var, LOG_EPS,
};

use super::encoder::EncoderOutput;
use super::{ffn_forward, ModelConfig};
use crate::error::CoreError;

/// Cross attention with the entities as queries and one question's token
/// features as keys/values; PAD positions beyond `len` are masked out.
/// Output shape `(n_e, d)`.
pub fn question_aware_entities(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    h_e: Var,
    h_u_i: Var,
    len: usize,
) -> Result<Var, CoreError> {
    let t_q = g.shape(h_u_i)[0];
    if len == 0 || len > t_q {
        return Err(CoreError::Structural(format!(
            "question length {len} invalid for {t_q} encoded positions"
        )));
    }
    let w = mount_attention(g, params, "sel.attn")?;
    let mask = if len == t_q {
        AttnMask::None
    } else {
        AttnMask::KeyPad((0..t_q).map(|i| i >= len).collect())
    };
    let (out, _) = multi_head_attention(g, h_e, h_u_i, h_u_i, &w, cfg.heads, &mask)?;
    Ok(out)
}

/// Per-entity scalar logits from the selector's feed-forward head: `[n_e, 1]`.
pub fn answer_logits(
    g: &mut Graph,
    params: &ParamSet,
    h_qe: Var,
) -> Result<Var, CoreError> {
    Ok(ffn_forward(g, params, "sel.ffn", h_qe)?)
}

/// Extraction distribution over entities for one question: `[1, n_e]`,
/// rows summing to 1.
pub fn answer_probs(g: &mut Graph, params: &ParamSet, h_qe: Var) -> Result<Var, CoreError> {
    if g.shape(h_qe)[0] == 0 {
        return Err(CoreError::Structural("answer distribution needs at least one entity".into()));
    }
    let logits = answer_logits(g, params, h_qe)?;
    let row = g.transpose(logits)?;
    Ok(g.softmax(row, 1)?)
}

/// One extraction distribution per question from the encoder output.
pub fn answer_distributions(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    enc: &EncoderOutput,
) -> Result<Vec<Var>, CoreError> {
    let mut dists = Vec::with_capacity(enc.h_u.len());
    for (u, &len) in enc.h_u.iter().zip(&enc.q_lens) {
        let h_qe = question_aware_entities(cfg, g, params, enc.h_e, *u, len)?;
        dists.push(answer_probs(g, params, h_qe)?);
    }
    Ok(dists)
}

/// Negative log-likelihood of the gold entities: `−Σ_i ln A^i[gold_i]`.
pub fn qa_loss(g: &mut Graph, dists: &[Var], gold: &[usize]) -> Result<Var, CoreError> {
    if dists.is_empty() || dists.len() != gold.len() {
        return Err(CoreError::Structural(format!(
            "{} answer distributions for {} gold labels",
            dists.len(),
            gold.len()
        )));
    }
    for (i, (&d, &y)) in dists.iter().zip(gold).enumerate() {
        let n_e = g.shape(d)[1];
        if y >= n_e {
            return Err(CoreError::Structural(format!(
                "gold entity {y} out of range for question {i} with {n_e} entities"
            )));
        }
    }
    let stacked = g.concat_rows(dists)?;
    let picked = g.select_per_row(stacked, gold)?;
    let shifted = g.add_const(picked, LOG_EPS);
    let logs = g.ln(shifted);
    let total = g.sum_all(logs);
    Ok(g.scale(total, -1.0))
}

/// Argmax entity per question, ties broken toward the lower index.
pub fn predict_answers(g: &Graph, dists: &[Var]) -> Vec<usize> {
    dists
        .iter()
        .map(|&d| {
            let row = g.value(d).data();
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
