//! Transformer encoder with `K` prepended CLS tokens and per-CLS linear
//! injections after selected layers.
//!
//! Injections replace each CLS hidden state `h_k` by `W̃_k·h_k + b_k`, where
//! `W̃_k = W_k − mean_k' W_k'` when re-parameterization is active. The final
//! CLS rows are the per-CLS embeddings; their plain sum is the document vector.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{read_arrays, write_arrays, Checkpoint, NamedArray, MAGIC};
pub use config::EncoderConfig;
pub use forward::{
    apply_cls_injection, effective_projection, encode, forward_on_tape, BoundParams, EmbeddingSet,
};
pub use params::{EncoderParams, InjectionParams, LayerParams};
