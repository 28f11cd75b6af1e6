//! Color alignment loss and a toy conditional normalizing flow.
//!
//! The color alignment loss (CAL) compares per-channel *soft* histograms of
//! two images with the 1D Wasserstein-1 distance, so it is differentiable in
//! pixel values. The [`flow`] module provides a small conditional normalizing
//! flow with an exact negative log-likelihood, and [`optim`] trains it on the
//! joint objective `nll + lambda * cal`.
//!
//! Everything works in `f64` on planar (channel-major) images with values
//! nominally in `[0, 1]`.

pub mod cli;
pub mod dataset;
mod error;
pub mod flow;
pub mod histogram;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod transport;

pub use error::{Error, Result};
pub use histogram::{HistogramGrid, KernelConfig, SoftHistogram};
pub use image::Image;
pub use losses::{LossConfig, LossReport};
pub use transport::TransportResult;
