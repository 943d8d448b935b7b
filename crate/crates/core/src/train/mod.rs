//! Optimizer, training loop and ablation runner.

mod ablation;
mod gradcheck;
mod optim;
mod trainer;

pub use ablation::{
    default_cells, error_reduction_pct, mean_stderr, run_ablation, summarize, train_and_evaluate,
    AblationCell, AblationGrid, AblationReport, CellSpec, MetricSummary, REFERENCE_LR,
};
pub use gradcheck::{
    gradient_check, param_class, GradCheckOptions, GradCheckReport, PARAM_CLASSES,
};
pub use optim::{adam_step, lr_schedule, AdamHyper, AdamState};
pub use trainer::{
    derive_seed, epoch_triplets, loss_and_gradients, train, TrainConfig, TrainOutcome,
};
