#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod emotion;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fixture;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use corpus::{CorpusStats, EmotionPolarity, Utterance};
pub use error::{Error, Result};
pub use features::{AcousticFeatures, FeatureConfig};
pub use model::AcousticModel;
pub use trainer::Trainer;
