//! The decoder-only transformer: configuration, sequence layout, weights,
//! low-rank adapters, the forward pass and checkpoints.

pub mod backbone;
mod checkpoint;
mod config;
mod forward;
mod layout;
mod lora;
mod weights;

pub use backbone::planted_backbone;
pub use checkpoint::{blob_path, load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{
    adapted_linear, embed, embed_matrix, forward_layers, greedy_decode, layout_for, lm_logits, BoundAdapter,
    BoundBlock, BoundModel, ForwardOptions, ForwardStats, ForwardTrace, KvCache,
};
pub use layout::{PageSpan, SequenceLayout};
pub use lora::{LoraAdapter, LoraSet};
pub use weights::{BlockWeights, Proj, TransformerWeights};
