//! Encoders `f_a` and `f_l`, gated-attention pooling, output heads, and
//! the six network variants assembled from them.

mod config;
mod encoders;
mod network;

pub use config::{Architecture, ModelConfig};
pub use encoders::{AccelEncoder, AttentionPool, FcBlock, Head, LocEncoder};
pub use network::{
    argmax, BatchInput, ForwardVars, Model, Prediction, ACCEL_PREFIX, ATTENTION_PREFIX, HEAD_PREFIX, LOC_PREFIX,
};
