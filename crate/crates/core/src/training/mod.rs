//! Losses, optimization, metrics and experiment loops.

mod loss;
mod metrics;
mod optim;
mod records;
mod search;
mod trainer;

pub use loss::{entropy, objective, LossConfig};
pub use metrics::{compute_metrics, Metrics};
pub use optim::Adam;
pub use records::{model_grid_size, read_run_file, read_runs, write_runs, RunRecord};
pub use search::{grid_search, Combo, SearchConfig, SearchOutcome, SearchSpace, Trial};
pub use trainer::{accuracy, epoch_batches, evaluate, fit, train_epoch, EpochStats, FitResult, TrainConfig};
