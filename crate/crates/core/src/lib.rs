//! Probability-based fine-tuning objectives and the dynamics they induce.
//!
//! The crate covers the objective family `f(p)` on the correct-token
//! probability, closed-form logit gradients, initial risk rates under gradient
//! flow for a tabular softmax model, desk-scale training experiments, and
//! diagnostics over token-probability logs from external models.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod grad;
pub mod ingest;
pub mod objective;
pub mod plot;
pub mod simplex;
pub mod toy_train;
pub mod verify;

pub use error::{Error, Result};
pub use objective::{Objective, ObjectiveSpec, ThresholdInterval};
pub use simplex::{Logits, OneHot, Simplex};
