//! Streaming test-time adaptation of a small classifier by anchored clustering
//! regularized self-training.
//!
//! The crate is organised bottom-up:
//!
//! - [`stats`]: Gaussian statistics, Cholesky factorisation, closed-form KL
//!   divergence and the memory-bounded running moment updates.
//! - [`network`]: a rectified MLP backbone with a linear head, exact backward
//!   pass and SGD with momentum.
//! - [`filters`]: temporal-consistency and posterior-confidence pseudo-label
//!   filtering.
//! - [`losses`]: anchored clustering, global alignment and self-training
//!   objectives with analytic feature/parameter gradients.
//! - [`source`]: source-domain anchors, either estimated from labelled
//!   features or inferred from classifier weights alone.
//! - [`engine`]: the sequential predict-then-adapt driver, the sample queue
//!   and the baseline adapters.
//! - [`bench`]: synthetic shifted domains, source training and experiment
//!   grids.

pub mod bench;
pub mod data;
pub mod engine;
mod error;
pub mod filters;
pub mod losses;
pub mod network;
pub mod source;
pub mod stats;

pub use error::{Error, Result};
pub use nalgebra;
