//! Sequence-to-sequence models with a fixed-size memory attention mechanism.
//!
//! The crate provides the full numerical stack for training and decoding
//! small encoder-decoder models on the CPU:
//!
//! - [`tensor`]: dense row-major tensors in 64-bit precision
//! - [`graph`]: a tape-based reverse-mode automatic differentiation engine
//! - [`optim`]: Adam with bias correction and global-norm gradient clipping
//! - [`lstm`]: LSTM cells, stacked layers and a bidirectional encoder
//! - [`attention`]: content-based (Bahdanau/Luong) attention and the
//!   memory-based variant that compresses the source into `K` context
//!   vectors during encoding, with optional position encodings
//! - [`seq2seq`]: the assembled encoder-attention-decoder model
//! - [`decode`]: greedy and beam-search decoding
//! - [`bleu`]: corpus-level BLEU-4 matching the multi-bleu convention
//!
//! The crate is `no_std` (with `alloc`); all IO, timing and file formats
//! live in the companion `memattn` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod bleu;
pub mod decode;
pub mod error;
pub mod graph;
pub mod lstm;
pub mod optim;
pub mod rng;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use tensor::Tensor;
