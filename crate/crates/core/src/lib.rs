//! Unsupervised change detection between two registered point clouds of the
//! same area acquired at different dates.
//!
//! The main pipeline trains a small point-convolution network without labels
//! ([`ssl`]), then compares per-point features of the two epochs by nearest
//! point and thresholds the difference magnitude with Otsu's method
//! ([`dcva`]). Two distance baselines ([`baselines`]), a synthetic scene
//! generator ([`synth`]) and binary scoring ([`metrics`]) complete the set.

pub mod baselines;
pub mod dcva;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod net;
mod io_util;
pub mod par;
pub mod ssl;
pub mod synth;

pub use error::{Error, Result};
