//! Vocal-burst multitask toolkit: audio cleanup, log-mel and learnable
//! Gabor STRF frontends, a small multitask network for age, emotion and
//! country, challenge metrics, and late score fusion.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for application code.

pub mod audio;
pub mod config;
pub mod data;
pub mod dsp;
pub mod embeddings;
pub mod features;
pub mod fsutil;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod synth;

pub use scalar::Real;

pub type Audio = audio::AudioBuffer<f64>;
pub type Audio32 = audio::AudioBuffer<f32>;
pub type Features = features::FeatureSequence<f64>;
pub type Features32 = features::FeatureSequence<f32>;
pub type Embeddings = embeddings::EmbeddingSequence<f64>;
pub type StrfBank64 = features::StrfBank<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
