//! Training orchestration: configuration, checkpointing, the optimization
//! loop, and evaluation reports.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Ablation, TrainConfig};
pub use eval::{evaluate, DocResult, EvalReport};
pub use trainer::{
    attach_qa, selected_pairs, train, LossBreakdown, TrainData, TrainOutcome, TrainState,
};
