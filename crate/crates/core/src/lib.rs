//! Structured knowledge distillation for dense prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f32 tensors with reverse-mode (and double) differentiation.
//! - [`nets`]: declarative teacher, student and discriminator networks.
//! - [`distill`]: pixel-wise, pair-wise and holistic distillation losses plus baselines.
//! - [`tasks`]: synthetic segmentation and depth data, depth binning, teacher caches.
//! - [`metrics`]: confusion-matrix IoU, depth errors, discriminator score analysis.
//! - [`harness`]: optimizers, schedules, training loops, evaluation and reports.

pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, GradStore, Tape, Tensor};
