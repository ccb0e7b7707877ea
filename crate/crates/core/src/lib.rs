//! Class-incremental learning engine.
//!
//! A small reverse-mode autodiff core drives a three-stage self-attention
//! convnet that is trained task by task. Old classes are protected by
//! temperature distillation from a frozen snapshot of the previous model,
//! by distillation of the snapshot's aleatoric variance heads and by
//! distillation of the per-stage attention maps. MC-dropout gives the
//! epistemic side of the predictive uncertainty.
//!
//! Module map:
//!
//! * [`tensor`]: tensors, the gradient tape, the seeded generator and the
//!   finite-difference gradient checker.
//! * [`nn`]: layers, the attention stages, the incremental model and its
//!   binary parameter container.
//! * [`losses`]: every training objective and their weighted sum.
//! * [`engine`]: task sequencing, exemplar memory, training and evaluation.
//! * [`data`]: the synthetic grating generator, IDX ingestion, normalization.
//! * [`report`]: ACC/FGT, run configuration, result files and the CLI.

pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod nn;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
