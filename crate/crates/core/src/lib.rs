//! Byte-level language modeling with learned, script-routed segmentation.
//!
//! Bytes are encoded by a small causal transformer, a per-script boundary
//! predictor decides where segments end, segment states are mean-pooled
//! for a deeper middle block, and the result is upsampled back to byte
//! resolution for next-byte prediction. A binomial prior per script sets
//! each script's compression rate so that parallel text in different
//! scripts ends up with similar token counts.

pub mod analysis;
pub mod baselines;
pub mod compute;
pub mod corpus;
pub mod hourglass;
pub mod tokenizer;

pub use corpus::{CorpusDoc, ScriptConfig, ScriptId, ScriptTable, Vocab};
pub use hourglass::{Model, ModelConfig};
