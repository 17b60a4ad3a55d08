//! Compact convolutional transformer: convolutional tokenizer, transformer
//! encoder, attention sequence pooling and a linear head.

mod config;
mod forward;
mod params;

pub use config::{CctConfig, PositionalEmbedding};
pub use forward::{
    argmax_rows, classify_head, encode, features_to_tokens, forward, forward_from_features,
    predict, register_constants, register_params, seq_pool, tokenize, tokenizer_features,
    ForwardOutput,
};
pub use params::{CctParams, ConvBlock, EncoderLayer};
