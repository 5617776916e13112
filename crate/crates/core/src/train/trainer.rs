//! The training loop: joint loss assembly, Adam with linear warmup,
//! gradient accumulation, periodic greedy-decode validation, metrics
//! logging, and improvement-gated checkpointing.
//!
//! Batching samples documents with replacement: each optimizer step draws
//! `batch_size x grad_accum` document indices from the training split, so a
//! resumed run replays the exact same draws from the stored generator
//! position. Per-document losses are scaled by `1 / (batch_size x
//! grad_accum)` and their gradients accumulated before the single Adam
//! update, which makes any factorization of the same product bitwise
//! equivalent.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fes_autodiff::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor};

use crate::corpus::Document;
use crate::error::CoreError;
use crate::margin::max_margin_loss;
use crate::metrics::{qa_em_f1, rouge_l};
use crate::model::decoder::{decode_teacher_forced, generate_summary, kl_alignment_loss, summarization_loss};
use crate::model::encoder::encode;
use crate::model::lm::{init_lm_params, lm_gold_probs, pretrain_lm};
use crate::model::selector::{answer_distributions, predict_answers, qa_loss};
use crate::model::init_model_params;
use crate::qa::{build_candidate_pairs, mark_selected, rank_for_inference, ranker_examples, select_oracle, PairRanker, QAPair};
use crate::train::checkpoint::save_checkpoint;
use crate::train::config::{Ablation, TrainConfig};
use crate::vocab::{Vocabulary, BOS, EOS};

/// Everything that evolves during training. Together with the
/// configuration this determines the rest of the run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamSet,
    pub lm_params: ParamSet,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    /// Best validation ROUGE-L F1 seen so far (negative infinity initially).
    pub best_val: f64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

/// Training and validation splits sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub vocab: Vocabulary,
}

/// Unweighted per-term values plus the weighted total for one document or
/// one averaged step.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_kl: f64,
    pub l_m: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.l_s += other.l_s;
        self.l_c += other.l_c;
        self.l_kl += other.l_kl;
        self.l_m += other.l_m;
    }

    fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * c,
            l_s: self.l_s * c,
            l_c: self.l_c * c,
            l_kl: self.l_kl * c,
            l_m: self.l_m * c,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Mean per-document total loss of each completed (possibly partial
    /// final) epoch.
    pub epoch_losses: Vec<f64>,
    /// `(step, validation ROUGE-L F1)` at each validation point.
    pub val_history: Vec<(u64, f64)>,
    /// Language-model pretraining curve (empty when resuming).
    pub lm_curve: Vec<f64>,
}

/// Builds QA pairs for every split: oracle selection on the training split,
/// then a ranker fit on those oracle labels picks pairs for the other
/// splits. Returns the fitted ranker.
pub fn attach_qa(
    vocab: &Vocabulary,
    train: &mut [Document],
    held_out: &mut [&mut [Document]],
    k: usize,
) -> Result<PairRanker, CoreError> {
    if k == 0 {
        return Err(CoreError::Config("qa_pairs must be ≥ 1".into()));
    }
    for doc in train.iter_mut() {
        let candidates = build_candidate_pairs(doc, vocab)?;
        doc.qa_pairs = select_oracle(candidates, doc, vocab, &doc.summary.clone(), k);
    }
    let ranker = PairRanker::fit(&ranker_examples(train), 200, 0.5);
    for split in held_out.iter_mut() {
        for doc in split.iter_mut() {
            let candidates = build_candidate_pairs(doc, vocab)?;
            let mut ranked = rank_for_inference(candidates, doc, &ranker)?;
            mark_selected(&mut ranked, k);
            doc.qa_pairs = ranked;
        }
    }
    Ok(ranker)
}

/// The pairs a document feeds to the model: the selected subset under the
/// given ablation, or none when question input is ablated away.
pub fn selected_pairs(doc: &Document, ablation: Ablation) -> Vec<QAPair> {
    if !ablation.uses_qa_input() {
        return Vec::new();
    }
    doc.qa_pairs.iter().filter(|p| p.is_oracle).cloned().collect()
}

/// `k` uniformly drawn answerable candidates (distinct when possible),
/// replacing oracle selection under the random-pairs ablation.
fn random_pairs(doc: &Document, k: usize, rng: &mut ChaCha8Rng) -> Vec<QAPair> {
    let n = doc.qa_pairs.len();
    if n <= k {
        return doc.qa_pairs.clone();
    }
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    indices[..k].iter().map(|&i| doc.qa_pairs[i].clone()).collect()
}

/// Builds the joint loss for one document in a fresh graph, backpropagates
/// the weighted total scaled by `grad_scale`, and accumulates parameter
/// gradients. Returns the unscaled loss values.
pub fn accumulate_doc_gradients(
    cfg: &TrainConfig,
    params: &mut ParamSet,
    lm_params: &ParamSet,
    doc: &Document,
    pairs: &[QAPair],
    weights: (f64, f64, f64),
    margin_active: bool,
    grad_scale: f64,
) -> Result<LossBreakdown, CoreError> {
    let (loss, breakdown, mut g) =
        doc_loss(cfg, params, lm_params, doc, pairs, weights, margin_active)?;
    let scaled = g.scale(loss, grad_scale);
    g.backward(scaled)?;
    g.export_grads(params)?;
    Ok(breakdown)
}

/// Assembles `L = L_s + λ_c L_c + λ_KL L_KL + λ_m L_m` for one document.
/// With every weight at zero the returned node *is* the summarization loss.
/// Language-model probabilities enter as constants from a separate
/// forward-only pass, so no gradient can reach the frozen language model.
pub fn doc_loss(
    cfg: &TrainConfig,
    params: &ParamSet,
    lm_params: &ParamSet,
    doc: &Document,
    pairs: &[QAPair],
    weights: (f64, f64, f64),
    margin_active: bool,
) -> Result<(fes_autodiff::Var, LossBreakdown, Graph), CoreError> {
    if doc.summary.is_empty() {
        return Err(CoreError::Data(format!("document {} has an empty summary", doc.id)));
    }
    let (w_c, w_kl, w_m) = weights;
    let model = &cfg.model;

    let mut g = Graph::new();
    let (enc, _) = encode(model, &mut g, params, doc, pairs)?;

    let mut input = Vec::with_capacity(doc.summary.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&doc.summary);
    let targets: Vec<u32> = doc.summary.iter().copied().chain(std::iter::once(EOS)).collect();

    let trace = decode_teacher_forced(model, &mut g, params, &input, enc.h_e, enc.h_w)?;
    let l_s = summarization_loss(&mut g, trace.p, &targets)?;
    let mut total = l_s;
    let mut breakdown =
        LossBreakdown { l_s: g.scalar_value(l_s)?, ..LossBreakdown::default() };

    let needs_qa = !pairs.is_empty() && (w_c > 0.0 || w_kl > 0.0);
    if needs_qa {
        let dists = answer_distributions(model, &mut g, params, &enc)?;
        if w_c > 0.0 {
            let gold: Vec<usize> = pairs.iter().map(|p| p.answer_entity).collect();
            let l_c = qa_loss(&mut g, &dists, &gold)?;
            breakdown.l_c = g.scalar_value(l_c)?;
            let weighted = g.scale(l_c, w_c);
            total = g.add(total, weighted)?;
        }
        if w_kl > 0.0 {
            let l_kl = kl_alignment_loss(&mut g, &dists, trace.e_avg, model.symmetric_kl)?;
            breakdown.l_kl = g.scalar_value(l_kl)?;
            let weighted = g.scale(l_kl, w_kl);
            total = g.add(total, weighted)?;
        }
    }

    if w_m > 0.0 && margin_active {
        let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let gold_probs = g.select_per_row(trace.p, &ids)?;
        let p_lm = lm_gold_probs(model, lm_params, &doc.summary)?;
        let l_m = max_margin_loss(&mut g, gold_probs, &p_lm, cfg.margin_power)?;
        breakdown.l_m = g.scalar_value(l_m)?;
        let weighted = g.scale(l_m, w_m);
        total = g.add(total, weighted)?;
    }

    breakdown.total = g.scalar_value(total)?;
    Ok((total, breakdown, g))
}

/// Model-selection score over a validation split: mean greedy-decode
/// ROUGE-L F1, averaged with question-answering exact match whenever the
/// variant consumes question input. Selecting on ROUGE-L alone can freeze a
/// checkpoint whose answer head has not converged yet, so both tasks vote.
pub fn validation_score(
    cfg: &TrainConfig,
    params: &ParamSet,
    docs: &[Document],
    ablation: Ablation,
) -> Result<f64, CoreError> {
    if docs.is_empty() {
        return Err(CoreError::Data("validation split is empty".into()));
    }
    let mut rouge_sum = 0.0;
    let mut em_sum = 0.0;
    let mut n_pairs = 0usize;
    for doc in docs {
        let pairs = selected_pairs(doc, ablation);
        let (tokens, _) = generate_summary(&cfg.model, params, doc, &pairs, 1)?;
        rouge_sum += rouge_l(&tokens, &doc.summary).f1;
        if !pairs.is_empty() {
            let mut g = Graph::new();
            let (enc, _) = encode(&cfg.model, &mut g, params, doc, &pairs)?;
            let dists = answer_distributions(&cfg.model, &mut g, params, &enc)?;
            let entity_strings: Vec<String> =
                doc.entities.iter().map(|e| e.text.clone()).collect();
            for (pred, pair) in predict_answers(&g, &dists).iter().zip(&pairs) {
                let (em, _) = qa_em_f1(*pred, pair.answer_entity, &entity_strings);
                em_sum += em;
                n_pairs += 1;
            }
        }
    }
    let rouge = rouge_sum / docs.len() as f64;
    if n_pairs > 0 {
        Ok(0.5 * (rouge + em_sum / n_pairs as f64))
    } else {
        Ok(rouge)
    }
}

fn fill_missing_grads(params: &mut ParamSet) {
    for (_, p) in params.iter_mut() {
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }
}

struct MetricsLog {
    file: Option<std::fs::File>,
}

impl MetricsLog {
    fn open(path: Option<&Path>, append: bool) -> Result<MetricsLog, CoreError> {
        let file = match path {
            Some(p) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(p)?,
            ),
            None => None,
        };
        Ok(MetricsLog { file })
    }

    fn record(&mut self, line: &serde_json::Value) -> Result<(), CoreError> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Runs (or continues) a training run.
///
/// * `resume`: continue from a loaded state instead of initializing; the
///   language model is only pretrained on fresh starts.
/// * `max_steps`: absolute optimizer-step target overriding the
///   epoch-derived budget — training stops once `state.step` reaches it.
/// * `metrics_path`: JSON-lines log, one object per optimizer step plus one
///   per validation (truncated on fresh starts, appended on resume).
/// * `checkpoint_path`: written whenever validation improves on the best
///   score so far. A numerical failure aborts *without* touching the file,
///   so the last good checkpoint survives.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    ablation: Ablation,
    resume: Option<TrainState>,
    max_steps: Option<u64>,
    metrics_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, CoreError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(CoreError::Data("training split is empty".into()));
    }
    for doc in data.train.iter().chain(&data.val) {
        if doc.summary.is_empty() {
            return Err(CoreError::Data(format!("document {} has an empty summary", doc.id)));
        }
    }

    let resuming = resume.is_some();
    let mut rng;
    let mut state;
    let mut lm_curve = Vec::new();

    match resume {
        Some(s) => {
            rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
            rng.set_word_pos(s.rng_word_pos);
            state = s;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let params = init_model_params(&cfg.model, &mut rng)?;
            let mut lm_params = init_lm_params(&cfg.model, &mut rng)?;
            let summaries: Vec<Vec<u32>> =
                data.train.iter().map(|d| d.summary.clone()).collect();
            if cfg.lm_epochs > 0 {
                lm_curve =
                    pretrain_lm(&cfg.model, &mut lm_params, &summaries, cfg.lm_epochs, cfg.lm_lr, &mut rng)?;
            }
            state = TrainState {
                params,
                lm_params,
                adam: AdamState::new(),
                step: 0,
                best_val: f64::NEG_INFINITY,
                rng_seed: cfg.seed,
                rng_word_pos: rng.get_word_pos(),
            };
        }
    }

    let docs_per_step = cfg.batch_size * cfg.grad_accum;
    let steps_per_epoch = (data.train.len() / docs_per_step).max(1) as u64;
    let target_steps = match max_steps {
        Some(t) => t,
        None => steps_per_epoch * cfg.epochs as u64,
    };
    let validate_interval =
        if cfg.validate_every > 0 { cfg.validate_every } else { steps_per_epoch };

    let mut metrics = MetricsLog::open(metrics_path, resuming)?;
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0u64;
    let mut val_history = Vec::new();
    let weights = ablation.weights(cfg);
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };

    while state.step < target_steps {
        let margin_active = state.step >= cfg.margin_delay_steps;
        state.params.zero_grads();
        let mut step_losses = LossBreakdown::default();
        let grad_scale = 1.0 / docs_per_step as f64;

        for _ in 0..docs_per_step {
            let idx = rng.gen_range(0..data.train.len());
            let doc = &data.train[idx];
            let pairs = match ablation {
                Ablation::RandomQa => random_pairs(doc, cfg.qa_pairs, &mut rng),
                _ => selected_pairs(doc, ablation),
            };
            let breakdown = accumulate_doc_gradients(
                cfg,
                &mut state.params,
                &state.lm_params,
                doc,
                &pairs,
                weights,
                margin_active,
                grad_scale,
            )?;
            if !breakdown.total.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "non-finite loss {} on document {} at step {}",
                    breakdown.total,
                    doc.id,
                    state.step + 1
                )));
            }
            step_losses.add(&breakdown);
        }

        fill_missing_grads(&mut state.params);
        let warmup = cfg.warmup_steps.max(1) as f64;
        let lr_scale = (((state.step + 1) as f64) / warmup).min(1.0);
        adam_step(&mut state.params, &mut state.adam, &adam_cfg, cfg.lr * lr_scale)?;
        if state.params.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "non-finite parameters after optimizer step {}",
                state.step + 1
            )));
        }

        state.step += 1;
        state.rng_word_pos = rng.get_word_pos();

        let mean = step_losses.scaled(grad_scale);
        epoch_sum += mean.total;
        epoch_count += 1;
        metrics.record(&serde_json::json!({
            "kind": "step",
            "step": state.step,
            "ablation": ablation.to_string(),
            "lr": cfg.lr * lr_scale,
            "loss": mean.total,
            "l_s": mean.l_s,
            "l_c": mean.l_c,
            "l_kl": mean.l_kl,
            "l_m": mean.l_m,
        }))?;

        if state.step % steps_per_epoch == 0 {
            epoch_losses.push(epoch_sum / epoch_count as f64);
            epoch_sum = 0.0;
            epoch_count = 0;
        }

        if !data.val.is_empty() && state.step % validate_interval == 0 {
            let score = validation_score(cfg, &state.params, &data.val, ablation)?;
            val_history.push((state.step, score));
            let improved = score > state.best_val;
            if improved {
                state.best_val = score;
                if let Some(path) = checkpoint_path {
                    save_checkpoint(path, cfg, &state)?;
                }
            }
            metrics.record(&serde_json::json!({
                "kind": "validation",
                "step": state.step,
                "ablation": ablation.to_string(),
                "score": score,
                "best": state.best_val,
                "improved": improved,
            }))?;
        }
    }

    if epoch_count > 0 {
        epoch_losses.push(epoch_sum / epoch_count as f64);
    }
    Ok(TrainOutcome { state, epoch_losses, val_history, lm_curve })
}
