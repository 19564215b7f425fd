//! Low-resolution prior equilibrium (LRPE) CT reconstruction.
//!
//! A weight-shared unrolled gradient-descent iteration whose regularization
//! network is conditioned on a coarse-grid reconstruction of the same
//! measurement, together with classical baselines (FBP, TV), the plain
//! unrolled ablation, and numerical contraction certificates for the
//! fixed-point iteration.
//!
//! Pipeline: build a sparse system matrix by exact ray tracing, simulate
//! measurements from synthetic phantoms, reconstruct with any of the
//! methods, and score with PSNR/SSIM. See the `lrpe-cli` crate for the
//! command-line front end.

pub mod certify;
pub mod equilibrium;
pub mod error;
pub mod experiment;
pub mod fbp;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod phantom;
pub mod resample;
pub mod system;
pub mod tv;

pub use error::{Error, Result};
