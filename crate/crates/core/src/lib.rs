//! Siamese deep domain adaptation for cross-session multichannel time-series
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors, a reverse-mode tape over the handful of
//!   kernels the reference networks need, and a finite-difference checker.
//! - [`preproc`]: bandpass FIR filtering, exponential moving standardization,
//!   per-channel scaling into `[-1, 1]` and Euclidean alignment.
//! - [`models`]: the shallow ConvNet and EEGNet builders with parameter
//!   accounting.
//! - [`losses`]: softmax, cosine center and Gaussian-kernel MMD losses.
//! - [`train`]: AdamW, the two-stage Siamese training loop and the trade-off
//!   grid search.
//! - [`data`]: trial sets, the binary trial container, CSV import, session
//!   splits and a synthetic motor-imagery generator.
//! - [`metrics`]: accuracy, Cohen's kappa and report tables.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod preproc;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
