//! Depth-from-defocus reconstruction with a coded aperture.
//!
//! The library covers the whole desk-scale pipeline:
//!
//! - [`schedule`]: DDPM noise schedules and the closed-form estimators built on them
//! - [`optics`]: thin-lens blur geometry, coded PSF handling, PSF banks
//! - [`state`]: RGB-plus-depth scene states and their normalized encoding
//! - [`forward`]: depth-dependent scatter rendering, its adjoint, data fidelity
//! - [`prior`]: score models (analytic Gaussian/mixture priors, a small trainable denoiser)
//! - [`sampler`]: reverse-diffusion samplers, with and without measurement guidance
//! - [`baseline`]: classical per-depth deconvolution sweep for comparison
//! - [`scene`]: synthetic scene generation
//! - [`metrics`]: depth MAE, PSNR, evaluation reports
//! - [`io`]: file formats (float maps, PSF containers, schedule tables, checkpoints, PNG)
//!
//! All numerics are `f64`; every randomized routine takes an explicit seed and is
//! bit-reproducible for a fixed seed.

pub mod baseline;
pub mod error;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod optics;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod state;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
