//! The three-block model: a causal byte encoder, a middle block over pooled
//! segments, and an upsampling decoder, trained on next-byte prediction plus
//! the per-script compression prior.

mod checkpoint;
mod model;
mod optim;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::ComputeError;
use crate::corpus::{ScriptConfig, ScriptId, Vocab};
use crate::tokenizer::{PredictorSpec, TokenizerError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{Arch, BatchLoss, BoundaryNoise, ForwardTrace, Model, RowLoss};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use train::{train, StepLog, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("row of {len} bytes exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("row must start with a script tag and hold at least one byte")]
    MalformedRow,
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("non-finite value in parameter {param} after update")]
    NonFiniteParameter { param: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How boundaries are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Learned predictors, each serving one or more scripts.
    Learned { predictors: Vec<PredictorSpec> },
    /// Every byte closes a segment; no predictor exists.
    AllBytes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub ffn_width: usize,
    pub heads: usize,
    pub layers_first: usize,
    pub layers_middle: usize,
    pub layers_last: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub scripts: Vec<ScriptConfig>,
    pub boundary: BoundaryMode,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Initial output bias of every boundary predictor (a logit).
    #[serde(default)]
    pub predictor_bias_init: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Desk-scale shape: width 64, 2/2/2 layers, ffn 256, 4 heads, max_len 128,
    /// one predictor per script.
    pub fn desk(scripts: Vec<ScriptConfig>) -> Self {
        let predictors = scripts
            .iter()
            .map(|s| PredictorSpec { beta: s.beta, scripts: vec![s.script] })
            .collect();
        ModelConfig {
            width: 64,
            ffn_width: 256,
            heads: 4,
            layers_first: 2,
            layers_middle: 2,
            layers_last: 2,
            max_len: 128,
            vocab_size: Vocab::BYTES as usize + scripts.len(),
            tau: 0.5,
            lambda: 1.0,
            scripts,
            boundary: BoundaryMode::Learned { predictors },
            seed: 0,
            init_std: default_init_std(),
            predictor_bias_init: 0.0,
        }
    }

    /// Full-size shape: width 768, 2/10/2 layers, ffn 3072, 12 heads, max_len 512.
    pub fn full(scripts: Vec<ScriptConfig>) -> Self {
        ModelConfig {
            width: 768,
            ffn_width: 3072,
            heads: 12,
            layers_middle: 10,
            max_len: 512,
            ..Self::desk(scripts)
        }
    }

    /// Same shape with the byte-level boundary mode.
    pub fn into_byte_level(mut self) -> Self {
        self.boundary = BoundaryMode::AllBytes;
        self
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.scripts.len())
    }

    pub fn script_ids(&self) -> Vec<ScriptId> {
        self.scripts.iter().map(|s| s.script).collect()
    }

    pub fn predictors(&self) -> &[PredictorSpec] {
        match &self.boundary {
            BoundaryMode::Learned { predictors } => predictors,
            BoundaryMode::AllBytes => &[],
        }
    }

    /// Display name of predictor `i`: its script if it serves one, else "shared".
    pub fn predictor_name(&self, i: usize) -> String {
        match self.predictors().get(i) {
            Some(p) if p.scripts.len() == 1 => p.scripts[0].to_string(),
            Some(_) => "shared".to_string(),
            None => "byte".to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.ffn_width == 0 || self.max_len == 0 {
            return bad("ffn_width and max_len must be positive".into());
        }
        if self.scripts.is_empty() {
            return bad("no scripts configured".into());
        }
        for (i, s) in self.scripts.iter().enumerate() {
            if s.script.index() != i {
                return bad(format!("script {} listed at position {i}; scripts must be ordered by id", s.script));
            }
            if !(s.beta > 0.0 && s.beta <= 1.0) {
                return bad(format!("beta {} outside (0, 1]", s.beta));
            }
        }
        if self.vocab_size != self.vocab().size() {
            return bad(format!("vocab_size {} but {} scripts need {}", self.vocab_size, self.scripts.len(), self.vocab().size()));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if let BoundaryMode::Learned { predictors } = &self.boundary {
            if predictors.is_empty() {
                return bad("learned boundaries need at least one predictor".into());
            }
            crate::tokenizer::Router::new(predictors, self.vocab())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PriorPreset;

    #[test]
    fn presets_validate() {
        let s = PriorPreset::Magnet5x10x20x.script_configs();
        ModelConfig::desk(s.clone()).validate().unwrap();
        ModelConfig::full(s.clone()).validate().unwrap();
        ModelConfig::desk(s).into_byte_level().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let s = PriorPreset::Magnet5x10x20x.script_configs();
        let base = ModelConfig::desk(s);
        let cases = [
            ModelConfig { heads: 5, ..base.clone() },
            ModelConfig { vocab_size: 300, ..base.clone() },
            ModelConfig { tau: 0.0, ..base.clone() },
            ModelConfig { boundary: BoundaryMode::Learned { predictors: vec![] }, ..base.clone() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_)) | Err(ModelError::Tokenizer(_))));
        }
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::desk(PriorPreset::Magnet5x10x20x.script_configs());
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
