//! Desk-scale sequence-to-sequence transformers that can be warm-started
//! from encoder-only (BERT-style) and decoder-only (GPT-style) checkpoints.
//!
//! The crate covers the full loop: a minimal autodiff tensor core, wordpiece
//! tokenization, the BERT-compatible encoder/decoder stacks, a named-tensor
//! archive format with checkpoint surgery (rename/split/transpose, layer
//! subsets, embeddings-only), the ten initialization schemes, fine-tuning
//! with the inverse-sqrt schedule, greedy/beam decoding, and SARI/BLEU/ROUGE
//! evaluation.

pub mod archive;
pub mod config;
pub mod convert;
pub mod data;
pub mod decode;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod scheme;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod warmstart;

pub use error::{Error, Result};
pub use tensor::Tensor;
