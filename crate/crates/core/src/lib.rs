//! Generative sequential recommendation with self-distilled fine-tuning.
//!
//! A small causal transformer is fine-tuned to emit the title of a user's
//! next item. Its own greedy outputs form an auxiliary label set, and a
//! curriculum weight driven by how close generations are to real targets
//! mixes the two sources during a second fine-tuning stage.

pub mod data;
pub mod distill;
pub mod grounding;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scheduler;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use data::{DataError, ItemCatalog, PromptTargetPair, SplitDataset};
pub use distill::{DistillError, SdPair};
pub use grounding::ItemEmbeddingIndex;
pub use metrics::{EvalError, MetricsReport, RankedPrediction};
pub use model::{ModelConfig, ModelError, ModelState};
pub use scheduler::{SchedulerError, SchedulerState};
pub use tensor::{Tape, Tensor, TensorError};
pub use trainer::{Regime, TrainConfig, TrainError};
pub use vocab::{TokenSeq, Vocab};
