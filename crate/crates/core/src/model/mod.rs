//! Transformer encoder with a class-wise cross-attention decoder.
//!
//! The encoder is pre-norm with learned absolute positions. For class `j`
//! the decoder computes `A_j = softmax(C_j K^T)` over `K = H W_key`, then
//! `ŷ_j = sigmoid(layernorm(A_j V) · W_out)` with `V = H W_value`.

mod config;
mod forward;
pub mod io;
mod params;

pub use config::ModelConfig;
pub use forward::{
    build, check_tokens, decode, embed, encode, forward_embeddings, predict, probabilities, Dropout,
    ForwardNodes, ForwardResult, ParamNodes,
};
pub use params::{AttentionHead, EncoderLayer, ModelParameters};
