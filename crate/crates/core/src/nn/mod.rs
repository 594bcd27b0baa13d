//! Reverse-mode autodiff over 2-D arrays, neural layers, and the optimizer.
//!
//! [`tape::Tape`] records a computation over `Array2<F>` values and replays it
//! backwards to produce exact gradients; [`layers`] builds linear maps,
//! normalization, attention, and convolutions on top of it; [`params`] owns
//! named persistent weights with per-parameter freeze flags; [`optim`]
//! implements decoupled-weight-decay Adam with a cosine schedule and global
//! gradient clipping. Everything is generic over the scalar type, and every
//! operation's gradient is validated against central finite differences in
//! f64.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{
    causal_mask, sinusoidal_posenc_1d, sinusoidal_posenc_2d, Conv2d, Embedding, FeedForward,
    LayerNorm, Linear, LoraLinear, MultiHeadAttention, TransformerLayer,
};
pub use optim::{clip_global_norm, cosine_lr, AdamW};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, PAD_ROW};
