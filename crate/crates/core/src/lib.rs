//! Clip-level video object segmentation with relative time encoding.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod davis;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod loss;
pub mod matching;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod types;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use memory::{MemoryBank, MemoryEntry, MemoryFeatures};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use types::{FrameTensor, MaskSequence, MultiScaleFeatures, VideoRecord};
