//! Partially separable dynamic MRI reconstruction.
//!
//! The pipeline: synthesize a partially separable phantom, undersample its
//! k-space with a Cartesian mask, build or calibrate annihilating filters,
//! reconstruct with a half-quadratic-splitting solver, optionally learn the
//! hyperparameters and filter taps by unrolling the solver, and score the
//! result with MSE/PSNR/SSIM.

pub mod error;
pub mod hankel;
pub mod hqs;
pub mod io;
pub mod learn;
pub mod metrics;
pub mod ps_model;
pub mod sampling;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ComplexVolume, Domain, GradientWeights};
