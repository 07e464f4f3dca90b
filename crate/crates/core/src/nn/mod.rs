//! Networks, their building blocks and training loops.

pub(crate) mod layers;
pub mod models;
pub(crate) mod ops;
pub mod params;
pub mod train;

pub use models::{
    argmax, classify, Autoencoder, AutoencoderConfig, ClassifierConfig, EpsilonModel, EpsilonModelConfig, LatentCodec,
    Model, VideoClassifier,
};
pub use params::ParamTable;
