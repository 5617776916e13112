//! Model architecture: configuration, parameter initialization, and the
//! shared transformer building blocks used by the encoder, the answer
//! selector, the decoder, and the prefix language model.

pub mod decoder;
pub mod encoder;
pub mod lm;
pub mod selector;

use fes_autodiff::{init_attention_params, AutodiffError, Graph, ParamSet, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lm_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub gat_iterations: usize,
    pub max_src_len: usize,
    pub max_summary_len: usize,
    /// Fraction of entity-cross-attention heads (top decoder layer) whose
    /// averaged attention defines the per-step entity distribution.
    pub kl_head_fraction: f64,
    pub leaky_slope: f64,
    /// Symmetrized KL by default; `false` selects the one-directional form.
    pub symmetric_kl: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 200,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            lm_layers: 2,
            heads: 4,
            ffn_mult: 4,
            gat_iterations: 2,
            max_src_len: 512,
            max_summary_len: 24,
            kl_head_fraction: 0.5,
            leaky_slope: 0.01,
            symmetric_kl: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.vocab_size < 4 {
            return Err(CoreError::Config("vocab_size must cover the reserved tokens".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.kl_head_fraction) {
            return Err(CoreError::Config(format!(
                "kl_head_fraction {} outside [0, 1]",
                self.kl_head_fraction
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.lm_layers == 0 {
            return Err(CoreError::Config("layer counts must be ≥ 1".into()));
        }
        if self.max_summary_len < 2 {
            return Err(CoreError::Config("max_summary_len must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Number of heads whose entity attention is averaged into the per-step
    /// entity distribution (always at least one).
    pub fn designated_heads(&self) -> usize {
        ((self.heads as f64 * self.kl_head_fraction).round() as usize).clamp(1, self.heads)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

pub(crate) fn init_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.insert(&format!("{prefix}.gamma"), Tensor::ones(&[d]));
    params.insert(&format!("{prefix}.beta"), Tensor::zeros(&[d]));
}

pub(crate) fn init_ffn(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(&format!("{prefix}.w1"), Tensor::xavier_uniform(d_in, d_hidden, rng));
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]));
    params.insert(&format!("{prefix}.w2"), Tensor::xavier_uniform(d_hidden, d_out, rng));
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d_out]));
}

/// Initializes the summarizer's full parameter set (token encoder, graph
/// layers, answer selector, decoder, and output projection). The language
/// model has its own set; see [`lm::init_lm_params`].
pub fn init_model_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet, CoreError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let h = cfg.ffn_hidden();
    let mut params = ParamSet::new();
    params.insert("embed.tok", Tensor::xavier_uniform(cfg.vocab_size, d, rng));

    for l in 0..cfg.enc_layers {
        init_attention_params(&mut params, &format!("enc{l}.attn"), d, rng);
        init_layer_norm(&mut params, &format!("enc{l}.ln1"), d);
        init_ffn(&mut params, &format!("enc{l}.ffn"), d, h, d, rng);
        init_layer_norm(&mut params, &format!("enc{l}.ln2"), d);
    }

    for l in 0..cfg.gat_iterations {
        params.insert(&format!("gat{l}.wa"), Tensor::xavier_uniform(2 * d, 1, rng));
        params.insert(&format!("gat{l}.wb"), Tensor::xavier_uniform(d, d, rng));
        params.insert(&format!("gat{l}.wc"), Tensor::xavier_uniform(d, d, rng));
        params.insert(&format!("gat{l}.wd"), Tensor::xavier_uniform(d, d, rng));
        init_ffn(&mut params, &format!("gat{l}.ffn"), d, h, d, rng);
    }

    init_attention_params(&mut params, "sel.attn", d, rng);
    init_ffn(&mut params, "sel.ffn", d, h, 1, rng);

    for l in 0..cfg.dec_layers {
        init_attention_params(&mut params, &format!("dec{l}.self"), d, rng);
        init_layer_norm(&mut params, &format!("dec{l}.ln1"), d);
        init_attention_params(&mut params, &format!("dec{l}.ent"), d, rng);
        init_layer_norm(&mut params, &format!("dec{l}.ln2"), d);
        init_attention_params(&mut params, &format!("dec{l}.word"), d, rng);
        init_layer_norm(&mut params, &format!("dec{l}.ln3"), d);
        init_ffn(&mut params, &format!("dec{l}.ffn"), d, h, d, rng);
        init_layer_norm(&mut params, &format!("dec{l}.ln4"), d);
    }

    params.insert("out.w", Tensor::xavier_uniform(d, cfg.vocab_size, rng));
    params.insert("out.b", Tensor::zeros(&[cfg.vocab_size]));
    Ok(params)
}

/// Fixed sinusoidal position encodings, `[len, d]`.
pub fn sinusoid_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * rate).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
        }
        if d % 2 == 1 {
            let rate = 1.0 / 10000f64.powf((d - 1) as f64 / d as f64);
            data[pos * d + d - 1] = (pos as f64 * rate).sin();
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

/// Token embeddings scaled by √d with positions added: `[len(ids), d]`.
pub(crate) fn embed_tokens(
    g: &mut Graph,
    params: &ParamSet,
    table: &str,
    ids: &[u32],
    d: usize,
) -> Result<Var, AutodiffError> {
    let emb = g.param(params, table)?;
    let indices: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let gathered = g.gather_rows(emb, &indices)?;
    let scaled = g.scale(gathered, (d as f64).sqrt());
    let pos = g.constant(sinusoid_encoding(ids.len(), d));
    g.add(scaled, pos)
}

/// Two-layer ReLU feed-forward: `relu(x·w1 + b1)·w2 + b2`.
pub(crate) fn ffn_forward(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    x: Var,
) -> Result<Var, AutodiffError> {
    let w1 = g.param(params, &format!("{prefix}.w1"))?;
    let b1 = g.param(params, &format!("{prefix}.b1"))?;
    let w2 = g.param(params, &format!("{prefix}.w2"))?;
    let b2 = g.param(params, &format!("{prefix}.b2"))?;
    let hidden = fes_autodiff::linear(g, x, w1, b1)?;
    let act = g.relu(hidden);
    fes_autodiff::linear(g, act, w2, b2)
}

/// Post-norm residual: `layer_norm(x + sub)`.
pub(crate) fn residual_norm(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    sub: Var,
) -> Result<Var, AutodiffError> {
    let gamma = g.param(params, &format!("{prefix}.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.beta"))?;
    let summed = g.add(x, sub)?;
    g.layer_norm(summed, gamma, beta, LN_EPS)
}
