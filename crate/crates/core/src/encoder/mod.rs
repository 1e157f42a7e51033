//! Small transformer encoder, tokenizer and mean pooling.

mod config;
mod model;
mod vocab;

pub use config::{EncoderConfig, Preset};
pub use model::{
    embed_corpus, mean_pool, Binder, Block, Encoder, Linear, Norm, ParamMode, Projection, BLOCK_LINEARS,
};
pub use vocab::{tokenize, TokenizedBatch, Vocab, PAD, UNK};
