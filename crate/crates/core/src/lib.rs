//! Multi-output Gaussian-convolution-process modulated Poisson processes.
//!
//! Units in a fleet share one latent Gaussian process; each unit's
//! log-intensity is that process smoothed by its own Gaussian kernel. The
//! crate fits the model by variational inference over inducing variables,
//! extrapolates a partially observed unit, forecasts event counts, and
//! simulates synthetic fleets.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod events;
pub mod inference;
pub mod kernel;
pub mod prediction;
pub mod quadrature;
pub mod simulation;

pub use error::{Error, Result};
pub use events::{EventDataset, ObservationWindow, UnitRecord};
pub use inference::{fit, FitConfig, FittedModel, VariationalState};
pub use kernel::{Hyperparameters, InducingPoints};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
