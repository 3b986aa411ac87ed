//! Two-stage contrastive audio/text music representations.
//!
//! Stage 1 aligns an audio encoder with a text encoder on song metadata.
//! Stage 2 fine-tunes the audio encoder on favoured trigger/recommendation
//! pairs, anchored by a fused audio+text embedding of the recommendation.
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

// `!(x > 0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod mel;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{HtclError, Result};
pub use scalar::Scalar;

pub type Embedding32 = encoders::Embedding<f32>;
pub type Embedding64 = encoders::Embedding<f64>;
pub type MelSpectrogram32 = mel::MelSpectrogram<f32>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type FeatureSet32 = model::FeatureSet<f32>;
pub type TrainState32 = train::TrainState<f32>;
pub type FusionParams32 = contrastive::FusionParams<f32>;
pub type FusionParams64 = contrastive::FusionParams<f64>;
