//! Decoder-only language model over summary prefixes. It never sees the
//! source document: its only input is the token sequence it scores, which
//! is what makes the margin against it meaningful.

use fes_autodiff::{
    adam_step, init_attention_params, linear, mount_attention, multi_head_attention, AdamConfig,
    AdamState, AttnMask, Graph, ParamSet, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::decoder::summarization_loss;
use super::{embed_tokens, ffn_forward, init_ffn, init_layer_norm, residual_norm, ModelConfig};
use crate::error::CoreError;
use crate::vocab::{BOS, EOS};

/// Initializes the language model's own parameter set (disjoint names from
/// the summarizer so the two can never be confused in one graph).
pub fn init_lm_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet, CoreError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let h = cfg.ffn_hidden();
    let mut params = ParamSet::new();
    params.insert("lm.embed", Tensor::xavier_uniform(cfg.vocab_size, d, rng));
    for l in 0..cfg.lm_layers {
        init_attention_params(&mut params, &format!("lm{l}.self"), d, rng);
        init_layer_norm(&mut params, &format!("lm{l}.ln1"), d);
        init_ffn(&mut params, &format!("lm{l}.ffn"), d, h, d, rng);
        init_layer_norm(&mut params, &format!("lm{l}.ln2"), d);
    }
    params.insert("lm.out.w", Tensor::xavier_uniform(d, cfg.vocab_size, rng));
    params.insert("lm.out.b", Tensor::zeros(&[cfg.vocab_size]));
    Ok(params)
}

/// Causal next-token distributions `[T, V]` for the prefix sequence.
pub fn lm_forward(
    cfg: &ModelConfig,
    g: &mut Graph,
    lm_params: &ParamSet,
    input_ids: &[u32],
) -> Result<Var, CoreError> {
    if input_ids.is_empty() {
        return Err(CoreError::Structural("language model input is empty".into()));
    }
    let mut x = embed_tokens(g, lm_params, "lm.embed", input_ids, cfg.d_model)?;
    for l in 0..cfg.lm_layers {
        let w = mount_attention(g, lm_params, &format!("lm{l}.self"))?;
        let (attn, _) = multi_head_attention(g, x, x, x, &w, cfg.heads, &AttnMask::Causal)?;
        x = residual_norm(g, lm_params, &format!("lm{l}.ln1"), x, attn)?;
        let f = ffn_forward(g, lm_params, &format!("lm{l}.ffn"), x)?;
        x = residual_norm(g, lm_params, &format!("lm{l}.ln2"), x, f)?;
    }
    let w = g.param(lm_params, "lm.out.w")?;
    let b = g.param(lm_params, "lm.out.b")?;
    let logits = linear(g, x, w, b)?;
    Ok(g.softmax(logits, 1)?)
}

/// Teacher-forced gold-token probabilities `P^LM_t(y_t)` for a summary,
/// targets being the summary followed by EOS. Forward-only.
pub fn lm_gold_probs(
    cfg: &ModelConfig,
    lm_params: &ParamSet,
    summary: &[u32],
) -> Result<Vec<f64>, CoreError> {
    if summary.is_empty() {
        return Err(CoreError::Structural("cannot score an empty summary".into()));
    }
    let mut input = Vec::with_capacity(summary.len() + 1);
    input.push(BOS);
    input.extend_from_slice(summary);
    let mut g = Graph::new();
    let p = lm_forward(cfg, &mut g, lm_params, &input)?;
    let pv = g.value(p);
    let mut out = Vec::with_capacity(summary.len() + 1);
    for (t, &y) in summary.iter().chain(std::iter::once(&EOS)).enumerate() {
        out.push(pv.at2(t, y as usize));
    }
    Ok(out)
}

/// Trains the language model on gold summaries with Adam, one summary per
/// step, loss normalized per token. Returns the mean per-token NLL of each
/// epoch (measured as the epoch runs), which decreases as the model fits.
pub fn pretrain_lm(
    cfg: &ModelConfig,
    lm_params: &mut ParamSet,
    summaries: &[Vec<u32>],
    epochs: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, CoreError> {
    if summaries.is_empty() || summaries.iter().any(Vec::is_empty) {
        return Err(CoreError::Data("language model pretraining needs non-empty summaries".into()));
    }
    let adam_cfg = AdamConfig { lr, ..AdamConfig::default() };
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    let mut epoch_nll = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for &i in &order {
            let summary = &summaries[i];
            let mut input = Vec::with_capacity(summary.len() + 1);
            input.push(BOS);
            input.extend_from_slice(summary);
            let mut targets = summary.clone();
            targets.push(EOS);

            let mut g = Graph::new();
            let p = lm_forward(cfg, &mut g, lm_params, &input)?;
            let nll = summarization_loss(&mut g, p, &targets)?;
            let scaled = g.scale(nll, 1.0 / targets.len() as f64);
            g.backward(scaled)?;
            g.export_grads(lm_params)?;
            adam_step(lm_params, &mut adam, &adam_cfg, lr)?;
            lm_params.zero_grads();

            total += g.scalar_value(nll)?;
            tokens += targets.len();
        }
        let mean = total / tokens as f64;
        if !mean.is_finite() {
            return Err(CoreError::Numerical("language model loss diverged".into()));
        }
        epoch_nll.push(mean);
    }
    Ok(epoch_nll)
}
