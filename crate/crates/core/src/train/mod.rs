//! Training: loss, optimizer, data, the epoch loop and the ablation harness.

pub mod ablation;
pub mod adam;
pub mod data;
pub mod loss;
pub mod trainer;

pub use ablation::{smooth, Ablation, RunResult, RunSpec, RunSummary, Suite, SuiteReport};
pub use adam::{adam_step, Adam, AdamConfig};
pub use data::{synthetic_blobs, BlobSpec, Dataset, DatasetSpec, Normalization};
pub use loss::{softmax_cross_entropy, topk_correct};
pub use trainer::{evaluate, train, EpochRecord, EvalResult, History, TrainConfig, Trainer};
