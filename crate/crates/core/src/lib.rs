//! Personalized low-rank adaptation (PLoRA) on a small attention encoder.
//!
//! A PLoRA layer augments a frozen projection `hW + b` with a task low-rank
//! path and a user-injection path that share one output factor:
//!
//! ```text
//! h' = hW + b + s · (h·W_task_in + p·W_person_in) · W_out
//! ```
//!
//! `W_out` and every user embedding `p` start at zero, so a fresh adapter is
//! an exact no-op and an anonymous user (`p = 0`) always gets the generic
//! model. The crate covers the layer and its hand-written gradients, an
//! encoder built from it, the training objectives and regimes, a synthetic
//! personalized corpus, metrics, weight folding for zero-overhead inference,
//! and a checksummed checkpoint format.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod plora;
pub mod trainer;
pub mod users;

pub use checkpoint::Checkpoint;
pub use encoder::{EncoderConfig, EncoderModel};
pub use error::{Error, Result};
pub use exec::Exec;
pub use linalg::{Matrix, Rng, Vector};
pub use metrics::MetricReport;
pub use plora::{PLoRAConfig, PLoRALinear};
pub use trainer::{Regime, RunConfig};
pub use users::{UserId, UserRegistry};
