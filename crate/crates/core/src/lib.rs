//! Camera relocalization from single RGB images with an hourglass
//! (encoder-decoder) convolutional network.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`geometry`] - quaternion/rotation utilities and pose error metrics.
//! - [`model`] - the two network variants (skip connections aggregated by
//!   concatenation or element-wise sum), forward/backward execution,
//!   initialization and checkpoint I/O.
//! - [`loss`] - the weighted translation + orientation training objective.
//! - [`data`] - scene ingestion in the 7-Scenes directory layout,
//!   per-scene intensity statistics, preprocessing and batching, plus a
//!   synthetic fixture generator for desk-scale tests.
//! - [`training`] - Adam with the staged learning-rate schedule,
//!   reproducible fitting and beta grid search.
//! - [`eval`] - per-frame errors, median summaries and error histograms.
//! - [`cli`] - the `hgpose` command-line surface.

pub mod cli;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod training;

pub use geometry::{Pose, Quaternion, RotationMatrix, Translation};
pub use model::{Model, ModelConfig, NetworkVariant, ParameterStore, PosePrediction};

use ndarray::{LinalgScalar, NdFloat};
use rand::distributions::uniform::SampleUniform;

/// Scalar element type of tensors. Training and checkpoints use `f32`;
/// gradient-check tests instantiate the same code with `f64`.
pub trait Elem: NdFloat + LinalgScalar + SampleUniform {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}
