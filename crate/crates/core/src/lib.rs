//! Deep LSTM language models with dropout on non-recurrent connections only.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` arrays and a reverse-mode tape
//! - [`dropout`]: counter-based inverted dropout
//! - [`model`]: RNN and LSTM cells and the regularized deep stack
//! - [`data`]: vocabularies, corpora and continuous batching
//! - [`train`]: truncated BPTT with clipped SGD
//! - [`infer`]: perplexity, ensembles, sampling and beam search
//! - [`checkpoint`] and [`run`]: persistence and reproducible run directories

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
mod dd;
pub mod dropout;
pub mod error;
pub mod infer;
pub mod model;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CorpusMode};
pub use data::{batchify, BatchedCorpus, TokenId, Vocabulary, Window};
pub use dropout::{Dropout, MaskTrace, Mode};
pub use error::{Error, Result};
pub use infer::{BeamConfig, BeamResult, SamplerConfig};
pub use model::{LayerParams, LstmState, ModelParams, NoDropout, Regularizer};
pub use run::{Overrides, RunDir};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{EpochMetrics, Preset, Progress, TrainConfig, Trainer};
