//! Held-out evaluation: beam-decoded ROUGE, QA accuracy, and margin
//! statistics, with per-document outputs in a JSON-serializable report.

use serde::{Deserialize, Serialize};

use fes_autodiff::Graph;

use crate::corpus::Document;
use crate::error::CoreError;
use crate::margin::{collect_margin_records, margin_report, MarginReport};
use crate::metrics::{qa_em_f1, rouge_l, rouge_n, RougeScore};
use crate::model::decoder::generate_summary;
use crate::model::encoder::encode;
use crate::model::selector::{answer_distributions, predict_answers};
use crate::qa::QAPair;
use crate::train::config::{Ablation, TrainConfig};
use crate::train::trainer::{selected_pairs, TrainState};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocResult {
    pub id: u64,
    /// Detokenized generated summary.
    pub summary: String,
    /// Length-normalized log-probability of the generated summary.
    pub log_prob: f64,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    /// Mean exact-match over this document's selected QA pairs; absent when
    /// the model receives no question input.
    pub qa_em: Option<f64>,
    pub qa_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_docs: usize,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_f1: f64,
    /// Micro-averaged over every evaluated QA pair; absent when none were.
    pub qa_em: Option<f64>,
    pub qa_f1: Option<f64>,
    pub margin: MarginReport,
    pub docs: Vec<DocResult>,
}

/// Predicted answer entity per pair, from a fresh forward pass.
pub fn predict_doc_answers(
    cfg: &TrainConfig,
    state: &TrainState,
    doc: &Document,
    pairs: &[QAPair],
) -> Result<Vec<usize>, CoreError> {
    let mut g = Graph::new();
    let (enc, _) = encode(&cfg.model, &mut g, &state.params, doc, pairs)?;
    let dists = answer_distributions(&cfg.model, &mut g, &state.params, &enc)?;
    Ok(predict_answers(&g, &dists))
}

/// Scores a split: beam-decodes each document, compares against the
/// reference summary with ROUGE-1/2/L, answers the selected questions, and
/// aggregates margin statistics over the gold summaries.
pub fn evaluate(
    cfg: &TrainConfig,
    state: &TrainState,
    docs: &[Document],
    vocab: &Vocabulary,
    beam: usize,
    ablation: Ablation,
) -> Result<EvalReport, CoreError> {
    if docs.is_empty() {
        return Err(CoreError::Data("evaluation split is empty".into()));
    }
    let mut results = Vec::with_capacity(docs.len());
    let mut all_records = Vec::new();
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut n_pairs = 0usize;

    for doc in docs {
        let pairs = selected_pairs(doc, ablation);
        let (tokens, log_prob) = generate_summary(&cfg.model, &state.params, doc, &pairs, beam)?;

        let (qa_em, qa_f1) = if pairs.is_empty() {
            (None, None)
        } else {
            let predicted = predict_doc_answers(cfg, state, doc, &pairs)?;
            let entity_strings: Vec<String> =
                doc.entities.iter().map(|e| e.text.clone()).collect();
            let mut doc_em = 0.0;
            let mut doc_f1 = 0.0;
            for (pred, pair) in predicted.iter().zip(&pairs) {
                let (em, f1) = qa_em_f1(*pred, pair.answer_entity, &entity_strings);
                doc_em += em;
                doc_f1 += f1;
                em_sum += em;
                f1_sum += f1;
                n_pairs += 1;
            }
            (Some(doc_em / pairs.len() as f64), Some(doc_f1 / pairs.len() as f64))
        };

        all_records.extend(collect_margin_records(
            &cfg.model,
            &state.params,
            &state.lm_params,
            doc,
            &pairs,
        )?);

        results.push(DocResult {
            id: doc.id,
            summary: vocab.detokenize(&tokens),
            log_prob,
            rouge1: rouge_n(&tokens, &doc.summary, 1),
            rouge2: rouge_n(&tokens, &doc.summary, 2),
            rouge_l: rouge_l(&tokens, &doc.summary),
            qa_em,
            qa_f1,
        });
    }

    let n = docs.len() as f64;
    Ok(EvalReport {
        n_docs: docs.len(),
        rouge1_f1: results.iter().map(|r| r.rouge1.f1).sum::<f64>() / n,
        rouge2_f1: results.iter().map(|r| r.rouge2.f1).sum::<f64>() / n,
        rouge_l_f1: results.iter().map(|r| r.rouge_l.f1).sum::<f64>() / n,
        qa_em: (n_pairs > 0).then(|| em_sum / n_pairs as f64),
        qa_f1: (n_pairs > 0).then(|| f1_sum / n_pairs as f64),
        margin: margin_report(&all_records)?,
        docs: results,
    })
}
