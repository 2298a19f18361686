//! Training loop, optimizer, ranking metrics and hyperparameter grids.

mod eval;
mod grid;
mod optim;
mod train;

pub use eval::{evaluate, rank_credit, rank_of_target, EvalMetrics, EvalOptions};
pub use grid::{run_experiment_grid, GridCell, GridReport, GridSpec, MeanStd};
pub use optim::{adam_update, lr_schedule, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    train, BatchSpec, EpochMetrics, FrequencyBasis, MetricsReport, ModelSpec, NoiseSpec,
    RunStatus, Sampling, TrainConfig, TrainOutcome,
};
