//! Heterogeneous document graph: entity, sentence, and question nodes
//! with bidirectional question→sentence→entity edges and self-loops.

use fes_autodiff::{Tensor, MASK_NEG};

use crate::corpus::Document;
use crate::error::CoreError;
use crate::qa::QAPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Entity(usize),
    Sentence(usize),
    Question(usize),
}

#[derive(Debug, Clone)]
pub struct SemanticGraph {
    pub kinds: Vec<NodeKind>,
    /// Sorted neighbor lists; every node's list contains the node itself.
    pub neighbors: Vec<Vec<usize>>,
    pub n_entities: usize,
    pub n_sentences: usize,
    pub n_questions: usize,
}

impl SemanticGraph {
    pub fn n_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn entity_node(&self, i: usize) -> usize {
        i
    }

    pub fn sentence_node(&self, j: usize) -> usize {
        self.n_entities + j
    }

    pub fn question_node(&self, q: usize) -> usize {
        self.n_entities + self.n_sentences + q
    }

    /// Additive pre-softmax mask: 0 where `j` neighbors `i`, else a huge
    /// negative constant, so attention normalizes over neighborhoods only.
    pub fn adjacency_mask(&self) -> Tensor {
        let n = self.n_nodes();
        let mut data = vec![MASK_NEG; n * n];
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                data[i * n + j] = 0.0;
            }
        }
        Tensor::new(vec![n, n], data).expect("square mask")
    }

    pub fn edge_count_directed(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Builds the document graph for the given (already selected) QA pairs.
///
/// Initial edge direction is question→sentence→entity; reverse edges and
/// self-loops are always added. A question connects to every sentence
/// containing a mention of its answer entity, falling back to all
/// sentences if there is none, which keeps the graph connected.
pub fn build_graph(doc: &Document, pairs: &[QAPair]) -> Result<SemanticGraph, CoreError> {
    let n_e = doc.entities.len();
    let n_s = doc.sentences.len();
    let n_q = pairs.len();
    if n_e == 0 || n_s == 0 {
        return Err(CoreError::Structural(format!(
            "document {}: graph needs at least one entity and one sentence",
            doc.id
        )));
    }
    let n = n_e + n_s + n_q;
    let mut kinds = Vec::with_capacity(n);
    kinds.extend((0..n_e).map(NodeKind::Entity));
    kinds.extend((0..n_s).map(NodeKind::Sentence));
    kinds.extend((0..n_q).map(NodeKind::Question));

    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut connect = |a: usize, b: usize| {
        neighbors[a].push(b);
        neighbors[b].push(a);
    };

    // Sentence ↔ entity edges from mention containment.
    let mut entity_sentences: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    for (e, entity) in doc.entities.iter().enumerate() {
        for &(start, end) in &entity.mentions {
            let s = doc
                .sentence_of(start)
                .filter(|&s| end <= doc.sentences[s].1)
                .ok_or_else(|| {
                    CoreError::Structural(format!(
                        "document {}: mention of entity {e} not inside a sentence",
                        doc.id
                    ))
                })?;
            if !entity_sentences[e].contains(&s) {
                entity_sentences[e].push(s);
            }
        }
        if entity_sentences[e].is_empty() {
            return Err(CoreError::Structural(format!(
                "document {}: entity {e} has no sentence",
                doc.id
            )));
        }
        for &s in &entity_sentences[e] {
            connect(n_e + s, e);
        }
    }

    // Question ↔ sentence edges through the answer entity's sentences.
    for (q, pair) in pairs.iter().enumerate() {
        if pair.answer_entity >= n_e {
            return Err(CoreError::Structural(format!(
                "document {}: QA pair answer entity {} out of range",
                doc.id, pair.answer_entity
            )));
        }
        let linked = &entity_sentences[pair.answer_entity];
        if linked.is_empty() {
            for s in 0..n_s {
                connect(n_e + n_s + q, n_e + s);
            }
        } else {
            for &s in linked {
                connect(n_e + n_s + q, n_e + s);
            }
        }
    }

    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Ok(SemanticGraph { kinds, neighbors, n_entities: n_e, n_sentences: n_s, n_questions: n_q })
}
