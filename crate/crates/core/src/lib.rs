//! Two-stage, attention-guided heatmap regression for 2D landmark detection.
//!
//! A coarse u-net regresses (K+1)-channel Gaussian heatmaps over a downscaled
//! image; its per-landmark maxima select proposal regions in which a second,
//! patch-based u-net refines the heatmaps at higher resolution. Five
//! overlapping patches per landmark ("expansive exploration") are merged by
//! averaging and decoded with a threshold-centroid rule.

pub mod autodiff;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod pipeline;
pub mod unet;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
