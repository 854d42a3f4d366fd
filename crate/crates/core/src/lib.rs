//! Task-agnostic foreground segmentation: one encoder-decoder and one
//! parameter set serve both salient and camouflaged scenes, trained with a
//! foreground/background contrastive penalty in supervised or pseudo-label
//! self-training regimes, plus the customary evaluation metric suite.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]: `f32` or
//! `f64`); the training engine and checkpoints run at `f64`.

pub mod backbone;
pub mod cdp;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod igc;
pub mod interp;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pseudo;
pub mod scalar;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete aliases at the default precisions.
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ImageTensor32 = types::ImageTensor<f32>;
pub type ImageTensor64 = types::ImageTensor<f64>;
pub type MaskTensor32 = types::MaskTensor<f32>;
pub type MaskTensor64 = types::MaskTensor<f64>;
pub type InferenceMap64 = types::InferenceMap<f64>;
pub type LossBreakdown64 = loss::LossBreakdown<f64>;
