//! Anchor-free temporal action localization: a convolutional feature
//! pyramid with coarse boundary regression, background feature sampling,
//! per-level transformer encoders with sampled cross-level context, and
//! refinement heads. Everything runs on a small `f64` autodiff engine.

pub mod backbone;
pub mod cli;
pub mod bfs;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod params;
pub mod segment;
pub mod selftest;
pub mod training;
pub mod transformer;

pub use config::{load_config, Config, EncoderType, InferenceConfig, ModelConfig, ScaleMode, TrainConfig};
pub use error::{Error, Result};
pub use inference::Detection;
pub use model::Htnet;
pub use segment::Segment;
