//! Target classifier and loss predictor networks, their training loops, and
//! checkpoints.

mod checkpoint;
pub mod kernels;
mod network;
mod optim;
mod predictor;
mod target;

pub use checkpoint::Checkpoint;
pub use network::{ArchSpec, Head, Network, Trace};
pub use optim::{accumulate, Optimizer, TrainConfig};
pub use predictor::{
    batch_plan, mean_spearman, train_predictor, BatchSlot, LossPredictor, PredictorArch,
};
pub use target::{train_target, TargetArch, TargetClassifier};

pub(crate) use target::argmax;

/// Per-epoch training statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the samples of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Batches skipped because every sample was degenerate.
    pub skipped_batches: usize,
}
