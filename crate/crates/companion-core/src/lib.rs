//! Companion-regularized SGD training at desk scale.
//!
//! Two trainers share one deterministic substrate:
//!
//! - [`dcl`]: a deployed MLP trained with cross-entropy plus a logit-space
//!   consistency penalty toward a companion network that tracks a running
//!   blend of historical predictions.
//! - [`dcp`]: the cheaper prototype variant, replacing the companion
//!   network with per-class EMA logit prototypes.
//!
//! Supporting modules: [`tensor`] (reverse-mode autodiff on a per-step
//! tape), [`model`] (MLPs and checkpoints), [`objectives`] (losses and
//! logit distances), [`data`] (synthetic clusters, CSV, IDX, batching),
//! [`metrics`] (non-target consistency, perplexity, logit variation), and
//! [`rng`] (pinned, reproducible random streams).

pub mod data;
pub mod dcl;
pub mod dcp;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
