//! Document/question token encoder and the iterated graph-attention stack
//! producing entity, sentence, and question node features.

use fes_autodiff::{
    mean_rows, mount_attention, multi_head_attention, AttnMask, Graph, ParamSet, Var,
};

use super::{embed_tokens, ffn_forward, residual_norm, ModelConfig};
use crate::error::CoreError;
use crate::corpus::Document;
use crate::qa::QAPair;
use crate::semgraph::{build_graph, SemanticGraph};
use crate::vocab::PAD;

/// Token-level encodings: document rows plus one padded matrix per question.
#[derive(Debug)]
pub struct TokenEncoding {
    pub h_w: Var,
    pub h_u: Vec<Var>,
    pub q_lens: Vec<usize>,
}

/// Final encoder state consumed by the selector and the decoder.
pub struct EncoderOutput {
    pub h_w: Var,
    pub h_u: Vec<Var>,
    pub q_lens: Vec<usize>,
    pub h_e: Var,
    pub h_s: Var,
    pub h_q: Option<Var>,
    /// Graph-attention weight matrices, one per iteration (rows sum to 1).
    pub gat_alphas: Vec<Var>,
}

/// Runs the shared transformer stack over one token sequence.
fn token_stack(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    ids: &[u32],
    mask: &AttnMask,
) -> Result<Var, CoreError> {
    let mut x = embed_tokens(g, params, "embed.tok", ids, cfg.d_model)?;
    for l in 0..cfg.enc_layers {
        let w = mount_attention(g, params, &format!("enc{l}.attn"))?;
        let (attn, _) = multi_head_attention(g, x, x, x, &w, cfg.heads, mask)?;
        x = residual_norm(g, params, &format!("enc{l}.ln1"), x, attn)?;
        let f = ffn_forward(g, params, &format!("enc{l}.ffn"), x)?;
        x = residual_norm(g, params, &format!("enc{l}.ln2"), x, f)?;
    }
    Ok(x)
}

/// Encodes the document tokens and each question with the shared encoder.
/// Questions are padded to a common length; PAD positions are masked out of
/// attention and reported through `q_lens`.
pub fn encode_tokens(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    tokens: &[u32],
    questions: &[&[u32]],
) -> Result<TokenEncoding, CoreError> {
    if tokens.is_empty() {
        return Err(CoreError::Structural("cannot encode an empty document".into()));
    }
    let doc_ids = if tokens.len() > cfg.max_src_len {
        log::warn!(
            "document of {} tokens truncated to max_src_len {}",
            tokens.len(),
            cfg.max_src_len
        );
        &tokens[..cfg.max_src_len]
    } else {
        tokens
    };
    let h_w = token_stack(cfg, g, params, doc_ids, &AttnMask::None)?;

    let mut q_lens = Vec::with_capacity(questions.len());
    for (i, q) in questions.iter().enumerate() {
        let len = q.iter().take_while(|&&t| t != PAD).count();
        if len == 0 {
            return Err(CoreError::Structural(format!(
                "question {i} has no non-padding tokens"
            )));
        }
        q_lens.push(len.min(cfg.max_src_len));
    }
    let t_q = q_lens.iter().copied().max().unwrap_or(0);
    let mut h_u = Vec::with_capacity(questions.len());
    for (q, &len) in questions.iter().zip(&q_lens) {
        let mut padded: Vec<u32> = q[..len].to_vec();
        padded.resize(t_q, PAD);
        let key_mask: Vec<bool> = (0..t_q).map(|i| i >= len).collect();
        let mask =
            if len == t_q { AttnMask::None } else { AttnMask::KeyPad(key_mask) };
        h_u.push(token_stack(cfg, g, params, &padded, &mask)?);
    }
    Ok(TokenEncoding { h_w, h_u, q_lens })
}

/// Mean-pools token features into one row per graph node, ordered
/// entities, then sentences, then questions.
pub fn init_node_features(
    g: &mut Graph,
    h_w: Var,
    h_u: &[Var],
    q_lens: &[usize],
    graph: &SemanticGraph,
    doc: &Document,
) -> Result<Var, CoreError> {
    if graph.n_entities != doc.entities.len()
        || graph.n_sentences != doc.sentences.len()
        || graph.n_questions != h_u.len()
        || h_u.len() != q_lens.len()
    {
        return Err(CoreError::Structural(format!(
            "graph/document/question shape disagreement in document {}",
            doc.id
        )));
    }
    let n_rows = g.shape(h_w)[0];
    let mut rows = Vec::with_capacity(graph.n_nodes());

    for (e, entity) in doc.entities.iter().enumerate() {
        let mut positions: Vec<usize> = Vec::new();
        for &(start, end) in &entity.mentions {
            positions.extend(start..end.min(n_rows));
        }
        if positions.is_empty() {
            return Err(CoreError::Structural(format!(
                "document {}: entity {e} has no in-range mention tokens",
                doc.id
            )));
        }
        let picked = g.gather_rows(h_w, &positions)?;
        rows.push(mean_rows(g, picked)?);
    }
    for &(start, end) in &doc.sentences {
        let end = end.min(n_rows);
        if start >= end {
            return Err(CoreError::Structural(format!(
                "document {}: sentence span {start}..{end} empty after truncation",
                doc.id
            )));
        }
        let span: Vec<usize> = (start..end).collect();
        let picked = g.gather_rows(h_w, &span)?;
        rows.push(mean_rows(g, picked)?);
    }
    for (&u, &len) in h_u.iter().zip(q_lens) {
        let span: Vec<usize> = (0..len).collect();
        let picked = g.gather_rows(u, &span)?;
        rows.push(mean_rows(g, picked)?);
    }
    Ok(g.concat_rows(&rows)?)
}

/// One graph-attention iteration with residual gate and position-wise FFN:
/// scores `z_ij = leaky_relu(a·[W_b x_i ; W_c x_j])` softmaxed over each
/// node's neighborhood (via the additive `mask`), message
/// `l_i = σ(Σ_j α_ij W_d x_j)`, update `x + l`, then `y = y + ffn(y)`.
/// Returns the updated features and the attention matrix.
pub fn gat_layer(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    layer: usize,
    x: Var,
    mask: Var,
) -> Result<(Var, Var), CoreError> {
    let d = cfg.d_model;
    let n = g.shape(x)[0];
    let wa = g.param(params, &format!("gat{layer}.wa"))?;
    let wb = g.param(params, &format!("gat{layer}.wb"))?;
    let wc = g.param(params, &format!("gat{layer}.wc"))?;
    let wd = g.param(params, &format!("gat{layer}.wd"))?;

    let b = g.matmul(x, wb)?;
    let c = g.matmul(x, wc)?;
    let wa_src: Vec<usize> = (0..d).collect();
    let wa_dst: Vec<usize> = (d..2 * d).collect();
    let a_src = g.gather_rows(wa, &wa_src)?;
    let a_dst = g.gather_rows(wa, &wa_dst)?;
    let s_src = g.matmul(b, a_src)?; // [n, 1]
    let s_dst = g.matmul(c, a_dst)?; // [n, 1]

    // Outer sum z[i][j] = s_src[i] + s_dst[j] via rank-one broadcasts.
    let ones_row = g.constant(fes_autodiff::Tensor::ones(&[1, n]));
    let ones_col = g.constant(fes_autodiff::Tensor::ones(&[n, 1]));
    let by_row = g.matmul(s_src, ones_row)?;
    let s_dst_t = g.transpose(s_dst)?;
    let by_col = g.matmul(ones_col, s_dst_t)?;
    let z = g.add(by_row, by_col)?;
    let z = g.leaky_relu(z, cfg.leaky_slope);
    let masked = g.add(z, mask)?;
    let alpha = g.softmax(masked, 1)?;

    let projected = g.matmul(x, wd)?;
    let message = g.matmul(alpha, projected)?;
    let gate = g.sigmoid(message);
    let updated = g.add(x, gate)?;
    let f = ffn_forward(g, params, &format!("gat{layer}.ffn"), updated)?;
    let out = g.add(updated, f)?;
    Ok((out, alpha))
}

/// Full encoder: token transformer, graph construction, node pooling, and
/// the iterated GAT stack, with final features split by node kind.
pub fn encode(
    cfg: &ModelConfig,
    g: &mut Graph,
    params: &ParamSet,
    doc: &Document,
    pairs: &[QAPair],
) -> Result<(EncoderOutput, SemanticGraph), CoreError> {
    let graph = build_graph(doc, pairs)?;
    let questions: Vec<&[u32]> = pairs.iter().map(|p| p.question_tokens.as_slice()).collect();
    let enc = encode_tokens(cfg, g, params, &doc.tokens, &questions)?;
    let mut nodes = init_node_features(g, enc.h_w, &enc.h_u, &enc.q_lens, &graph, doc)?;
    let mask = g.constant(graph.adjacency_mask());
    let mut gat_alphas = Vec::with_capacity(cfg.gat_iterations);
    for l in 0..cfg.gat_iterations {
        let (next, alpha) = gat_layer(cfg, g, params, l, nodes, mask)?;
        nodes = next;
        gat_alphas.push(alpha);
    }
    let (n_e, n_s, n_q) = (graph.n_entities, graph.n_sentences, graph.n_questions);
    let e_rows: Vec<usize> = (0..n_e).collect();
    let s_rows: Vec<usize> = (n_e..n_e + n_s).collect();
    let h_e = g.gather_rows(nodes, &e_rows)?;
    let h_s = g.gather_rows(nodes, &s_rows)?;
    let h_q = if n_q > 0 {
        let q_rows: Vec<usize> = (n_e + n_s..n_e + n_s + n_q).collect();
        Some(g.gather_rows(nodes, &q_rows)?)
    } else {
        None
    };
    Ok((
        EncoderOutput { h_w: enc.h_w, h_u: enc.h_u, q_lens: enc.q_lens, h_e, h_s, h_q, gat_alphas },
        graph,
    ))
}
