//! Multi-view vision-language model for driving QA.
//!
//! The crate covers the whole pipeline at desk scale: a seeded synthetic
//! driving world with multi-view features and QA records, the preliminary
//! interaction encoder, Parallel LoRA routing, the end-to-end driving token
//! bridge, a tiny autoregressive decoder, training with a finite-difference
//! gradient checker, and staged chain-of-thought evaluation with the usual
//! driving-QA metrics.

pub mod autograd;
pub mod config;
pub mod e2e;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod lm;
pub mod params;
pub mod pi_encoder;
pub mod plora;
pub mod scene;
pub mod taxonomy;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{LmadError, Result};
pub use params::{ParamId, ParamStore};
pub use taxonomy::{Group, QType, Task};
pub use tensor::Tensor;
