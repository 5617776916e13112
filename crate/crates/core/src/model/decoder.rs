//! Summary decoder: causal self-attention, entity-level cross attention
//! (whose designated heads drive the alignment loss), word-level cross
//! attention, vocabulary projection, and beam search.

use std::cmp::Ordering;

use fes_autodiff::{
    kl_divergence, linear, mount_attention, multi_head_attention, normalize, symmetric_kl,
    AttnMask, Graph, ParamSet, Tensor, Var, LOG_EPS,
};

use super::{embed_tokens, ffn_forward, residual_norm, ModelConfig};
use crate::corpus::Document;
use crate::error::CoreError;
use crate::qa::QAPair;
use crate::vocab::{BOS, EOS, PAD};

/// Teacher-forced decoder outputs for one summary.
pub struct DecoderTrace {
    /// Vocabulary distribution per step, `[T, V]`, rows summing to 1.
    pub p: Var,
    /// Designated entity-attention heads of the top layer, each `[T, n_e]`.
    pub e_heads: Vec<Var>,
    /// Average of the designated heads, `[T, n_e]`, rows summing to 1.
    pub e_avg: Var,
}

/// Runs the decoder over the full input prefix in one causally masked pass.
/// `input_ids` is the BOS-shifted summary; row `t` of `p` is the next-token
/// distribution after seeing `input_ids[..=t]`.
pub fn decode_teacher_forced(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    input_ids: &[u32],
    h_e: Var,
    h_w: Var,
) -> Result<DecoderTrace, CoreError> {
    if input_ids.is_empty() {
        return Err(CoreError::Structural("decoder input is empty".into()));
    }
    if g.shape(h_e)[0] == 0 || g.shape(h_w)[0] == 0 {
        return Err(CoreError::Structural("decoder needs entity and token encodings".into()));
    }
    let mut x = embed_tokens(g, params, "embed.tok", input_ids, cfg.d_model)?;
    let mut top_heads: Vec<Var> = Vec::new();
    for l in 0..cfg.dec_layers {
        let w_self = mount_attention(g, params, &format!("dec{l}.self"))?;
        let (u, _) = multi_head_attention(g, x, x, x, &w_self, cfg.heads, &AttnMask::Causal)?;
        x = residual_norm(g, params, &format!("dec{l}.ln1"), x, u)?;

        let w_ent = mount_attention(g, params, &format!("dec{l}.ent"))?;
        let (c_e, ent_heads) =
            multi_head_attention(g, x, h_e, h_e, &w_ent, cfg.heads, &AttnMask::None)?;
        x = residual_norm(g, params, &format!("dec{l}.ln2"), x, c_e)?;
        if l + 1 == cfg.dec_layers {
            top_heads = ent_heads;
        }

        let w_word = mount_attention(g, params, &format!("dec{l}.word"))?;
        let (v, _) = multi_head_attention(g, x, h_w, h_w, &w_word, cfg.heads, &AttnMask::None)?;
        x = residual_norm(g, params, &format!("dec{l}.ln3"), x, v)?;

        let f = ffn_forward(g, params, &format!("dec{l}.ffn"), x)?;
        x = residual_norm(g, params, &format!("dec{l}.ln4"), x, f)?;
    }
    let w_out = g.param(params, "out.w")?;
    let b_out = g.param(params, "out.b")?;
    let logits = linear(g, x, w_out, b_out)?;
    let p = g.softmax(logits, 1)?;

    let k = cfg.designated_heads();
    let e_heads: Vec<Var> = top_heads.into_iter().take(k).collect();
    let mut acc = e_heads[0];
    for &h in &e_heads[1..] {
        acc = g.add(acc, h)?;
    }
    let e_avg = g.scale(acc, 1.0 / k as f64);
    Ok(DecoderTrace { p, e_heads, e_avg })
}

/// Alignment between aggregate QA attention and aggregate decoder entity
/// attention: both sums are renormalized to distributions, then compared
/// with symmetrized (or, when configured, one-directional) KL divergence.
pub fn kl_alignment_loss(
    g: &mut Graph,
    dists: &[Var],
    e_avg: Var,
    symmetric: bool,
) -> Result<Var, CoreError> {
    if dists.is_empty() {
        return Err(CoreError::Structural(
            "alignment needs at least one answer distribution".into(),
        ));
    }
    if g.shape(e_avg)[0] == 0 {
        return Err(CoreError::Structural("alignment needs at least one decoding step".into()));
    }
    let stacked = g.concat_rows(dists)?;
    if g.shape(stacked)[1] != g.shape(e_avg)[1] {
        return Err(CoreError::Structural(format!(
            "answer distributions cover {} entities, decoder attention {}",
            g.shape(stacked)[1],
            g.shape(e_avg)[1]
        )));
    }
    let p_raw = g.sum_axis(stacked, 0)?;
    let q_raw = g.sum_axis(e_avg, 0)?;
    for (name, v) in [("QA attention", p_raw), ("decoder entity attention", q_raw)] {
        let mass: f64 = g.value(v).data().iter().sum();
        if mass <= 0.0 {
            return Err(CoreError::Structural(format!("aggregate {name} has zero mass")));
        }
    }
    let p = normalize(g, p_raw)?;
    let q = normalize(g, q_raw)?;
    let loss =
        if symmetric { symmetric_kl(g, p, q)? } else { kl_divergence(g, p, q)? };
    Ok(loss)
}

/// Teacher-forced negative log-likelihood `−Σ_t ln P_t(y_t)` over every
/// step including EOS; PAD targets contribute nothing.
pub fn summarization_loss(g: &mut Graph, p: Var, targets: &[u32]) -> Result<Var, CoreError> {
    let (t, v) = (g.shape(p)[0], g.shape(p)[1]);
    if targets.len() != t {
        return Err(CoreError::Structural(format!(
            "{} target tokens for {} decoder steps",
            targets.len(),
            t
        )));
    }
    if targets.iter().all(|&y| y == PAD) {
        return Err(CoreError::Structural("no non-padding target tokens".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y as usize >= v) {
        return Err(CoreError::Structural(format!("target token {bad} outside vocabulary {v}")));
    }
    let ids: Vec<usize> = targets.iter().map(|&y| y as usize).collect();
    let picked = g.select_per_row(p, &ids)?;
    let shifted = g.add_const(picked, LOG_EPS);
    let logs = g.ln(shifted);
    let keep: Vec<f64> = targets.iter().map(|&y| if y == PAD { 0.0 } else { 1.0 }).collect();
    let mask = g.constant(Tensor::vector(keep));
    let masked = g.mul(logs, mask)?;
    let total = g.sum_all(masked);
    Ok(g.scale(total, -1.0))
}

/// Frozen per-document encodings reused across decoding steps.
pub struct DocEncoding {
    pub h_e: Tensor,
    pub h_w: Tensor,
}

/// Runs the encoder once and keeps the tensors needed for decoding.
pub fn encode_for_inference(
    cfg: &ModelConfig,
    params: &ParamSet,
    doc: &Document,
    pairs: &[QAPair],
) -> Result<DocEncoding, CoreError> {
    let mut g = Graph::new();
    let (enc, _) = super::encoder::encode(cfg, &mut g, params, doc, pairs)?;
    Ok(DocEncoding { h_e: g.value(enc.h_e).clone(), h_w: g.value(enc.h_w).clone() })
}

/// Next-token log-probabilities after the given prefix (starting at BOS).
pub fn next_token_log_probs(
    cfg: &ModelConfig,
    params: &ParamSet,
    enc: &DocEncoding,
    prefix: &[u32],
) -> Result<Vec<f64>, CoreError> {
    let mut g = Graph::new();
    let h_e = g.constant(enc.h_e.clone());
    let h_w = g.constant(enc.h_w.clone());
    let trace = decode_teacher_forced(cfg, &mut g, params, prefix, h_e, h_w)?;
    let p = g.value(trace.p);
    let last = p.row(p.dims2().0 - 1);
    Ok(last.iter().map(|&v| (v + LOG_EPS).ln()).collect())
}

/// Beam search over a next-token log-probability oracle. Hypotheses are
/// extended from BOS, ranked by cumulative log-probability while open, and
/// the best finished hypothesis under length normalization is returned
/// (tokens include the final EOS). PAD and BOS are never emitted; a
/// hypothesis reaching `max_len` is closed with a forced EOS. Ties break
/// toward the lexicographically smaller token sequence.
pub fn beam_search<F>(
    mut next_log_probs: F,
    beam: usize,
    max_len: usize,
) -> Result<(Vec<u32>, f64), CoreError>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>, CoreError>,
{
    if beam == 0 {
        return Err(CoreError::Config("beam size must be ≥ 1".into()));
    }
    if max_len == 0 {
        return Err(CoreError::Config("max_len must be ≥ 1".into()));
    }
    let mut active: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    while !active.is_empty() {
        let mut candidates: Vec<(Vec<u32>, f64)> = Vec::new();
        for (tokens, lp) in &active {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(tokens);
            let logs = next_log_probs(&prefix)?;
            if logs.len() <= EOS as usize {
                return Err(CoreError::Structural(format!(
                    "scoring returned {} log-probabilities, EOS not covered",
                    logs.len()
                )));
            }
            if tokens.len() + 1 >= max_len {
                let mut closed = tokens.clone();
                closed.push(EOS);
                finished.push((closed, lp + logs[EOS as usize]));
                continue;
            }
            for (id, &l) in logs.iter().enumerate() {
                if id == PAD as usize || id == BOS as usize {
                    continue;
                }
                let mut ext = tokens.clone();
                ext.push(id as u32);
                let score = lp + l;
                if id == EOS as usize {
                    finished.push((ext, score));
                } else {
                    candidates.push((ext, score));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
        });
        candidates.truncate(beam);
        active = candidates;
    }
    finished
        .into_iter()
        .map(|(tokens, lp)| {
            let norm = lp / tokens.len() as f64;
            (tokens, norm)
        })
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| b.0.cmp(&a.0)))
        .ok_or_else(|| CoreError::Numerical("beam search produced no finished hypothesis".into()))
}

/// Beam-decodes one document; returns the summary tokens (EOS stripped)
/// and the length-normalized log-probability.
pub fn generate_summary(
    cfg: &ModelConfig,
    params: &ParamSet,
    doc: &Document,
    pairs: &[QAPair],
    beam: usize,
) -> Result<(Vec<u32>, f64), CoreError> {
    let enc = encode_for_inference(cfg, params, doc, pairs)?;
    let (mut tokens, score) = beam_search(
        |prefix| next_token_log_probs(cfg, params, &enc, prefix),
        beam,
        cfg.max_summary_len,
    )?;
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok((tokens, score))
}
