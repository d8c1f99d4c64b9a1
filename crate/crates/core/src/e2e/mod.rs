//! End-to-end driving tokens: synthetic backbone, instance selection,
//! prompts and per-group adapters.

pub mod backbone;
pub mod bridge;

pub use backbone::{
    select_top_instances, synthetic_backbone, BackboneFeatures, BackboneHeads, E2EBackboneOutput, EgoEntry, Instance, Selection,
};
pub use bridge::{text_prompt_string_for, AdapterKind, BridgeConfig, E2EBridge, E2ETokenBlock};
