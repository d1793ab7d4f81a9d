//! Minimal neural-network layer on top of `candle-core`.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{
    AttnConfig, CrossAttentionLayer, Ctx, Dropout, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, SelfAttentionLayer,
};
pub use params::{Init, ParamStore, Params};
