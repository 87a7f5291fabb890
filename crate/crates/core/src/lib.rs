//! Convolutional image captioning: tensors and autodiff, caption corpora,
//! image augmentation, decoders, training, decoding and evaluation.

pub mod decode;
pub mod error;
pub mod experiment;
pub mod image;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use image::{FeatureSet, ImageFeatures, ImageRaster};
pub use model::{DecoderKind, Model, ModelConfig};
pub use tensor::{Element, Graph, Tensor, Var};
pub use text::{CaptionDataset, ImageRecord, Split, TrainingPair, Vocabulary};
