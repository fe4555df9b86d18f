//! Quasi-invariant image decomposition with per-pixel confidence.
//!
//! An RGB image is split into sub-modalities that are insensitive to a nuisance
//! factor (normalized rg chromaticity, multi-scale local binary patterns). A
//! Gaussian sensor-noise model, estimated from the image itself, is propagated
//! through each operator so that every output pixel can be tested against the
//! operator's null hypothesis ("no colour", "no texture") with a squared
//! Mahalanobis distance. The distances are turned into posterior confidence
//! maps that weight a normalized-convolution encoder.
//!
//! Stages, in pipeline order:
//!
//! - [`raster`]: buffers and file formats
//! - [`noise`]: single-image noise estimation
//! - [`illumination`]: gray-point von Kries correction
//! - [`rg`] and [`lbp`]: operators with propagated covariance
//! - [`confidence`]: mixture likelihoods, posterior, lambda schedule, priors
//! - [`nconv`]: normalized convolution, confidence pooling, linear head
//! - [`pipeline`]: the stages chained for one image
//! - [`synth`]: synthetic scenes, Monte-Carlo oracles and evaluation

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod error;
pub mod illumination;
pub mod lbp;
pub mod nconv;
pub mod noise;
pub mod pipeline;
pub mod raster;
pub mod rg;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{FloatMap, ImageRgb, IntensityMap};
