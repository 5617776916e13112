//! Margin between the summarizer and the prefix language model: per-token
//! records, the max-margin anti-overconfidence loss, and distribution
//! statistics.

use std::collections::HashSet;

use fes_autodiff::{Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::CoreError;
use crate::model::decoder::decode_teacher_forced;
use crate::model::encoder::encode;
use crate::model::lm::lm_gold_probs;
use crate::model::ModelConfig;
use crate::qa::QAPair;
use crate::vocab::{BOS, EOS};

/// Histogram resolution for margin distributions over [−1, 1].
pub const MARGIN_BINS: usize = 40;

/// One teacher-forced step: the summarizer's and the language model's
/// probabilities of the gold token, and their difference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginRecord {
    pub position: usize,
    pub token: u32,
    pub p_summarizer: f64,
    pub p_lm: f64,
    pub margin: f64,
    pub is_entity: bool,
}

/// `m_t = P_t − P_t^LM`.
pub fn margin(p_summarizer: f64, p_lm: f64) -> f64 {
    p_summarizer - p_lm
}

/// Max-margin loss `Σ_t (1 − P_t)(1 − m_t^k)/2` with the language-model
/// probabilities entering as constants, so its gradient reaches only the
/// summarizer. `gold_probs` holds the differentiable `P_t` values.
pub fn max_margin_loss(
    g: &mut Graph,
    gold_probs: Var,
    p_lm: &[f64],
    power: i32,
) -> Result<Var, CoreError> {
    let n = g.value(gold_probs).numel();
    if n != p_lm.len() {
        return Err(CoreError::Structural(format!(
            "{} summarizer probabilities against {} language-model probabilities",
            n,
            p_lm.len()
        )));
    }
    if power < 1 {
        return Err(CoreError::Config(format!("margin exponent must be ≥ 1, got {power}")));
    }
    let shape = g.shape(gold_probs).to_vec();
    let lm_const = g.constant(Tensor::new(shape, p_lm.to_vec()).expect("shape"));
    let m = g.sub(gold_probs, lm_const)?;
    let mk = g.pow_int(m, power);
    let neg_mk = g.scale(mk, -1.0);
    let one_minus_mk = g.add_const(neg_mk, 1.0);
    let neg_p = g.scale(gold_probs, -1.0);
    let one_minus_p = g.add_const(neg_p, 1.0);
    let terms = g.mul(one_minus_p, one_minus_mk)?;
    let total = g.sum_all(terms);
    Ok(g.scale(total, 0.5))
}

/// Aggregate statistics of a margin sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginStats {
    pub count: usize,
    pub fraction_negative: f64,
    pub mean_margin: f64,
    /// `MARGIN_BINS` equal-width bins over [−1, 1]; counts sum to `count`.
    pub histogram: Vec<usize>,
}

/// Overall statistics plus the entity-token-restricted view (absent when
/// the sample contains no entity positions).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginReport {
    pub overall: MarginStats,
    pub entity: Option<MarginStats>,
}

pub fn margin_stats(records: &[MarginRecord]) -> Result<MarginStats, CoreError> {
    if records.is_empty() {
        return Err(CoreError::Data("margin statistics need at least one record".into()));
    }
    let count = records.len();
    let negative = records.iter().filter(|r| r.margin < 0.0).count();
    let mean = records.iter().map(|r| r.margin).sum::<f64>() / count as f64;
    let mut histogram = vec![0usize; MARGIN_BINS];
    for r in records {
        let scaled = (r.margin + 1.0) / 2.0 * MARGIN_BINS as f64;
        let bin = (scaled.floor() as isize).clamp(0, MARGIN_BINS as isize - 1) as usize;
        histogram[bin] += 1;
    }
    Ok(MarginStats {
        count,
        fraction_negative: negative as f64 / count as f64,
        mean_margin: mean,
        histogram,
    })
}

pub fn margin_report(records: &[MarginRecord]) -> Result<MarginReport, CoreError> {
    let overall = margin_stats(records)?;
    let entity_records: Vec<MarginRecord> =
        records.iter().filter(|r| r.is_entity).cloned().collect();
    let entity =
        if entity_records.is_empty() { None } else { Some(margin_stats(&entity_records)?) };
    Ok(MarginReport { overall, entity })
}

/// Marks which gold summary target positions (summary tokens then EOS) are
/// entity tokens, judged by membership in the document's entity mentions.
pub fn summary_entity_flags(doc: &Document) -> Vec<bool> {
    let mut entity_ids: HashSet<u32> = HashSet::new();
    for entity in &doc.entities {
        for &(start, end) in &entity.mentions {
            for pos in start..end.min(doc.tokens.len()) {
                entity_ids.insert(doc.tokens[pos]);
            }
        }
    }
    let mut flags: Vec<bool> =
        doc.summary.iter().map(|t| entity_ids.contains(t)).collect();
    flags.push(false); // EOS
    flags
}

/// Teacher-forces the gold summary through both models and collects one
/// record per target token (including EOS). Forward-only.
pub fn collect_margin_records(
    cfg: &ModelConfig,
    params: &ParamSet,
    lm_params: &ParamSet,
    doc: &Document,
    pairs: &[QAPair],
) -> Result<Vec<MarginRecord>, CoreError> {
    if doc.summary.is_empty() {
        return Err(CoreError::Data(format!("document {} has an empty summary", doc.id)));
    }
    let mut input = Vec::with_capacity(doc.summary.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&doc.summary);
    let targets: Vec<u32> =
        doc.summary.iter().copied().chain(std::iter::once(EOS)).collect();

    let mut g = Graph::new();
    let (enc, _) = encode(cfg, &mut g, params, doc, pairs)?;
    let trace = decode_teacher_forced(cfg, &mut g, params, &input, enc.h_e, enc.h_w)?;
    let p = g.value(trace.p);
    let p_lm = lm_gold_probs(cfg, lm_params, &doc.summary)?;
    let flags = summary_entity_flags(doc);

    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let ps = p.at2(t, y as usize);
            MarginRecord {
                position: t,
                token: y,
                p_summarizer: ps,
                p_lm: p_lm[t],
                margin: margin(ps, p_lm[t]),
                is_entity: flags[t],
            }
        })
        .collect())
}
