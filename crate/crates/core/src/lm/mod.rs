//! Language side: vocabulary, decoder and checkpoints.

pub mod checkpoint;
pub mod decoder;
pub mod vocab;

pub use decoder::{argmax, Adapters, DecoderConfig, DecoderModel, InjectionMode, Prefix};
pub use vocab::Vocabulary;
