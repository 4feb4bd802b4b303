//! Vanilla Transformer encoder and word-level tokenizer.

pub mod encoder;
pub mod layers;
pub mod vocab;

pub use encoder::{Embeddings, Encoder};
pub use layers::{
    AttentionOutput, AttentionParams, Dropout, EncoderLayerParams, LayerNormParams, Linear,
};
pub use vocab::{tokenize, words, TokenSequence, Vocabulary};
