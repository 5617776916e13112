//! Faithfulness-enhanced summarization on a synthetic fact corpus: a
//! multi-task question-answering encoder over a heterogeneous
//! entity/sentence/question graph, a QA-attention-guided decoder, and a
//! max-margin regularizer against language-model overconfidence, plus the
//! corpus generator, QA-pair builder, metrics, and training harness that
//! tie them together.

pub mod corpus;
pub mod error;
pub mod margin;
pub mod metrics;
pub mod model;
pub mod qa;
pub mod semgraph;
pub mod train;
pub mod vocab;

pub use error::CoreError;
