//! Multilingual translation with transliterated alternative input signals.
//!
//! The crate covers rule-based transliteration, multi-way corpora and BPE,
//! a small transformer with several multi-encoder cross-attention modes,
//! training, ensemble beam search, and the evaluation metrics.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod train;
pub mod translit;

pub use corpus::{MultiwayCorpus, Record, SubwordModel};
pub use error::{Error, Result};
pub use model::{CrossAttentionMode, Model, ModelConfig};
pub use translit::{RuleTable, SignalKind};
