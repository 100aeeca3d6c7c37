//! Byte-level causal language model on LAVO attention blocks.
//!
//! Tokens are bytes (plus one padding id). Each block is pre-norm:
//! layer norm, attention, residual; layer norm, a 4x GELU feed-forward,
//! residual. There is no absolute position signal anywhere; the only
//! position information comes from the windowed relative bias inside
//! attention. The output head reuses the embedding matrix.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod selftest;
pub mod train;

use std::path::PathBuf;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{LmConfig, VOCAB_SIZE};
pub use corpus::{synthetic_text, CorpusStream};
pub use eval::{eval_ppl, EvalReport};
pub use model::{Decoder, LmModel};
pub use train::{train, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("loss became {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("not a LAVO checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lavo(#[from] lavo::error::LavoError),
}

pub type Result<T> = std::result::Result<T, LmError>;
