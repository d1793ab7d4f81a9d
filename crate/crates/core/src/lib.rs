//! Joint video moment retrieval and highlight detection.
//!
//! A query-conditioned clip encoder feeds a task-decoupled unit that produces
//! one feature sequence per task. A moment decoder predicts `(center, width)`
//! spans from one, a saliency decoder scores clips from the other, and the
//! two can guide each other through clip masks.

pub mod ablate;
pub mod config;
pub mod decoupled;
pub mod error;
pub mod feature_store;
pub mod feedback;
pub mod fusion;
pub mod hd_decoder;
pub mod joint_loss;
pub mod metrics;
pub mod model;
pub mod mr_decoder;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
