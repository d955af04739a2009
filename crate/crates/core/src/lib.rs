//! Modular blind video quality assessment.
//!
//! A base quality predictor scores a sparse set of downsampled key frames.
//! Two rectifiers look at what the downsampling throws away: the spatial
//! rectifier reads Laplacian-pyramid subbands of the key frames at their
//! actual resolution, the temporal rectifier reads short chunks at the actual
//! frame rate. Each emits an affine correction `(alpha, beta)` for the base
//! score, and the corrections are combined by geometric/arithmetic means over
//! whichever rectifiers are active. Rectifiers are randomly dropped during
//! training so the base predictor stays usable on its own.
//!
//! Module map:
//!
//! - [`media`]: clip I/O, key-frame and chunk sampling, resize/crop
//! - [`pyramid`]: bicubic resampling and Laplacian pyramids
//! - [`nn`]: tape-based autodiff, layers, backbones, Adam, weight files
//! - [`rectify`]: the model, rectifiers and their combination
//! - [`synth`]: procedural benchmarks with controlled degradations
//! - [`train`]: minibatch training with rectifier dropout
//! - [`eval`]: correlation metrics, split protocol and reports

pub mod error;
pub mod eval;
pub mod image;
pub mod media;
pub mod nn;
pub mod pyramid;
pub mod rectify;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use image::Image;
