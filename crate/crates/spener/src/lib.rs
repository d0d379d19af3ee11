//! Sparse-view fan-beam CT reconstruction toolkit.
//!
//! The core algorithm alternates two sub-problems in a half-quadratic
//! splitting loop: a data-fidelity solve, performed by fitting a coordinate
//! network (multiresolution hash encoding + convolutional prior-image encoder
//! + small MLP) against the measured sinogram through a differentiable ray
//! integrator, and a regularization solve, performed by an off-the-shelf
//! image denoiser applied to the network's extracted image. The crate also
//! ships the full simulation harness needed to exercise the method end to
//! end: analytic phantoms, a fan-beam projector with exact adjoint, filtered
//! backprojection, a Poisson low-dose noise model, denoisers, and PSNR/SSIM
//! metrics.
//!
//! All numerical code is generic over the scalar type ([`Scalar`], either
//! `f32` or `f64`); concrete aliases for the common instantiations live at
//! the crate root.

pub mod config;
pub mod denoise;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod simulate;
pub mod spener;
pub mod tomo;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision image, the default for reconstruction runs.
pub type ImageF32 = tomo::Image<f32>;
/// Double-precision image, used by oracles and gradient checks.
pub type ImageF64 = tomo::Image<f64>;
/// Single-precision sinogram.
pub type SinogramF32 = tomo::Sinogram<f32>;
/// Double-precision sinogram.
pub type SinogramF64 = tomo::Sinogram<f64>;
/// Single-precision network parameters.
pub type NetworkParamsF32 = nn::NetworkParams<f32>;
/// Double-precision network parameters.
pub type NetworkParamsF64 = nn::NetworkParams<f64>;
