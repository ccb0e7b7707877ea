//! Class-incremental training: configuration, exemplar memory, the
//! optimization step, the task loop, evaluation and MC-dropout uncertainty.

mod buffer;
mod config;
mod run;
mod train;
mod uncertainty;

pub use crate::data::{Task, TaskSequence};
pub use buffer::{quota, update_buffer, Exemplar, ExemplarBuffer};
pub use config::{CeScope, LossFlags, OptimizerConfig, TrainConfig};
pub use run::{
    argmax, evaluate, evaluate_tasks, run_sequence, run_sequence_with, LogRecord, RunObserver,
    RunOutput, RunStreams, EVAL_CHUNK,
};
pub use train::{build_objective, needs_teacher, train_one_batch, Batch, TeacherTargets, TrainState};
pub use uncertainty::{predictive_uncertainty, PredictiveUncertainty};
