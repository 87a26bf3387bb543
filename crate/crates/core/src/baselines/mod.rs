//! Comparison segmenters: one shared fixed prior, raw bytes, and BPE.

mod bpe;

use thiserror::Error;

use crate::corpus::ScriptId;
use crate::hourglass::{BoundaryMode, Model, ModelConfig, ModelError};
use crate::tokenizer::PredictorSpec;

pub use bpe::{bpe_train, sample_documents, BpeDoc, BpeModel, BpeTrainConfig};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("beta {0} outside (0, 1]")]
    InvalidBeta(f64),
    #[error("all language counts are zero")]
    AllZeroCounts,
    #[error("corpus too small: {merges} merges learned, target vocab {target}")]
    CorpusTooSmall { merges: usize, target: usize },
    #[error("invalid BPE model: {0}")]
    InvalidBpe(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `base` with a single boundary predictor shared by every script, all at prior `beta`.
pub fn dtp_config(beta: f64, base: &ModelConfig) -> Result<ModelConfig, BaselineError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(BaselineError::InvalidBeta(beta));
    }
    let mut cfg = base.clone();
    for s in &mut cfg.scripts {
        s.beta = beta;
    }
    cfg.boundary = BoundaryMode::Learned {
        predictors: vec![PredictorSpec { beta, scripts: cfg.script_ids() }],
    };
    Ok(cfg)
}

/// Display label of a fixed prior, e.g. 0.2 gives "DTP 5x".
pub fn dtp_label(beta: f64) -> String {
    format!("DTP {}x", (1.0 / beta).round())
}

/// Per-language document sampling probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingWeights {
    pub langs: Vec<String>,
    pub q: Vec<f64>,
}

/// q_i = p_i^α / Σ_j p_j^α with p_i = n_i / Σ_k n_k. Languages with no
/// tokens get weight 0 for every α, including α = 0.
pub fn alpha_sample_weights(counts: &[(String, f64)], alpha: f64) -> Result<SamplingWeights, BaselineError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BaselineError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if counts.iter().any(|(_, n)| !(n.is_finite() && *n >= 0.0)) {
        return Err(BaselineError::InvalidArgument("counts must be finite and non-negative".into()));
    }
    let total: f64 = counts.iter().map(|(_, n)| n).sum();
    if total <= 0.0 {
        return Err(BaselineError::AllZeroCounts);
    }
    let powered: Vec<f64> = counts
        .iter()
        .map(|(_, n)| if *n > 0.0 { (n / total).powf(alpha) } else { 0.0 })
        .collect();
    let z: f64 = powered.iter().sum();
    Ok(SamplingWeights {
        langs: counts.iter().map(|(l, _)| l.clone()).collect(),
        q: powered.iter().map(|x| x / z).collect(),
    })
}

/// Something that turns a sentence into a token count.
pub enum Segmenter {
    Byte,
    Bpe(BpeModel),
    Model(Box<Model<f32>>),
}

impl Segmenter {
    pub fn name(&self) -> &'static str {
        match self {
            Segmenter::Byte => "byte",
            Segmenter::Bpe(_) => "bpe",
            Segmenter::Model(_) => "model",
        }
    }

    /// Tokens for `text` written in `script`. Model mode thresholds boundary
    /// probabilities at 0.5; texts longer than the model's window are split
    /// at character boundaries and the segment counts summed.
    pub fn segment_count(&self, text: &str, script: ScriptId) -> Result<usize, BaselineError> {
        match self {
            Segmenter::Byte => Ok(text.len()),
            Segmenter::Bpe(m) => Ok(m.encode(text.as_bytes()).len()),
            Segmenter::Model(model) => {
                let cfg = model.config();
                let tag = cfg.vocab().tag_id(script);
                let mut total = 0;
                for chunk in char_chunks(text, cfg.max_len) {
                    let row: Vec<u32> = std::iter::once(tag).chain(chunk.bytes().map(u32::from)).collect();
                    total += model.segment(&row)?.m;
                }
                Ok(total)
            }
        }
    }
}

/// Splits `text` into pieces of at most `max` bytes without cutting a character.
pub fn char_chunks(text: &str, max: usize) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let mut cut = rest.len().min(max);
        while !rest.is_char_boundary(cut) {
            cut -= 1;
        }
        if cut == 0 {
            // A character wider than the window; keep it whole.
            cut = rest.chars().next().map_or(rest.len(), char::len_utf8);
        }
        out.push(&rest[..cut]);
        rest = &rest[cut..];
    }
    out
}
