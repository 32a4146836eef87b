//! Motion-robust multi-echo T2* mapping.
//!
//! Simulate motion-corrupted multi-echo GRE k-space, estimate per-line
//! exclusion masks from a physics consistency loss, reconstruct with
//! weighted CG-SENSE and evaluate against ground truth.

pub mod baselines;
pub mod container;
pub mod detector;
pub mod encoding;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod motion_csv;
pub mod phantom;
pub mod relaxometry;
pub mod schedule;
pub mod simulate;

pub use error::{Error, Result};
pub use model::*;
