//! Optimizers, configuration, training loops, evaluation, gradient checks
//! and reports.

mod config;
pub mod gradcheck;
mod optim;
pub mod report;
mod train;

pub use config::{DataConfig, DiscriminatorConfig, OptimizerKind, Paths, Seeds, Toggles, TrainConfig};
pub use optim::{poly_lr, Adam, Optimizer, Sgd};
pub use report::{ablation_table, write_report, AblationRow, AblationTable};
pub use train::{
    binning, discriminator_spec, distill_train, evaluate, generate_splits, load_splits, score_map, student_spec,
    task_loss, teacher_spec, train_dense, train_teacher, Outcome, RunKind, RunRecord, Splits, TeacherSource, Traces,
    RUN_RECORD,
};
