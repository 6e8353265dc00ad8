//! Conditional-diffusion laboratory over analytic toy distributions.
//!
//! The crate pairs a discrete-time denoising diffusion sampler with exact
//! analytic machinery (Gaussian-mixture scores, Doob h-transforms, conjugate
//! posteriors) so that every conditioning scheme — exact h-transform drift,
//! reconstruction guidance, replacement, resampling-style inpainting,
//! motif-frozen sampling, amortised conditional networks and h-transform
//! finetuning — can be scored against closed-form or brute-force ground truth.

pub mod bench;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nets;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod special;
pub mod svg;

pub use error::{Error, Result};
