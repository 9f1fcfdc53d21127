//! Minimal layer library on top of candle tensors.

pub mod attention;
pub mod conv;
pub mod layers;
pub mod params;

pub use attention::{softmax_last, Attention};
pub use layers::{sinusoidal_embedding, upsample2, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock, TemporalConv};
pub use params::{fnv1a, Init, ParamStore, Params};
