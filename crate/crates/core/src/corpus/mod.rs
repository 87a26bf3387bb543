//! Byte and script ingestion: documents, vocabulary layout, byte-to-word
//! statistics, prior derivation, batch packing and synthetic parallel data.

mod batch;
mod jsonl;
mod script;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{make_batches, make_batches_with, Batch, Packing};
pub use jsonl::{read_jsonl, write_jsonl, JsonlRecord};
pub use script::{detect_script, ScriptEntry, ScriptId, ScriptTable};
pub use synthetic::{gen_synthetic_parallel, SyntheticSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("text mixes scripts {first} and {second}")]
    AmbiguousScript { first: ScriptId, second: ScriptId },
    #[error("codepoint U+{codepoint:04X} is outside every configured script block")]
    UnknownScript { codepoint: u32 },
    #[error("text contains no script-bearing characters")]
    NoScriptLetters,
    #[error("declared script {declared} but detected {detected}")]
    ScriptMismatch { declared: ScriptId, detected: ScriptId },
    #[error("script name {0:?} is unknown or already registered")]
    DuplicateScript(String),
    #[error("unknown script name {0:?}")]
    UnknownScriptName(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document {index} has no whitespace-delimited words")]
    ZeroWords { index: usize },
    #[error("byte-to-word ratio {0} is below 1")]
    InvalidRatio(f64),
    #[error("{bytes} bytes per word cannot be built from {script} codepoints of {width} bytes")]
    UnrealizableLength { script: ScriptId, bytes: usize, width: usize },
    #[error("no synthetic inventory for script {0}")]
    UnsupportedScript(ScriptId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vocabulary layout: IDs 0-255 are bytes, then one tag per script, then PAD.
///
/// `size()` counts bytes and tags only; PAD is a sentinel that never reaches
/// the embedding table.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_scripts: usize,
}

impl Vocab {
    pub const BYTES: u32 = 256;

    pub fn new(n_scripts: usize) -> Self {
        Vocab { n_scripts }
    }

    pub fn tag_id(&self, script: ScriptId) -> u32 {
        Self::BYTES + script.0 as u32
    }

    pub fn script_of_tag(&self, id: u32) -> Option<ScriptId> {
        (id >= Self::BYTES && id < self.pad_id()).then(|| ScriptId((id - Self::BYTES) as u16))
    }

    pub fn pad_id(&self) -> u32 {
        Self::BYTES + self.n_scripts as u32
    }

    pub fn size(&self) -> usize {
        Self::BYTES as usize + self.n_scripts
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(ScriptTable::default().len())
    }
}

/// UTF-8 bytes of one single-script sequence plus its routing tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteSequence {
    bytes: Vec<u8>,
    script: ScriptId,
    tag_id: u32,
}

impl ByteSequence {
    pub fn from_bytes(bytes: Vec<u8>, table: &ScriptTable, vocab: &Vocab) -> Result<Self, CorpusError> {
        let text = std::str::from_utf8(&bytes).map_err(|_| CorpusError::InvalidUtf8)?;
        let script = table.detect(text)?;
        Ok(ByteSequence {
            bytes,
            script,
            tag_id: vocab.tag_id(script),
        })
    }

    pub fn from_text(text: &str, table: &ScriptTable, vocab: &Vocab) -> Result<Self, CorpusError> {
        Self::from_bytes(text.as_bytes().to_vec(), table, vocab)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn script(&self) -> ScriptId {
        self.script
    }

    pub fn tag_id(&self) -> u32 {
        self.tag_id
    }

    /// Model input: the tag at position 0 followed by the raw bytes.
    pub fn to_ids(&self) -> Vec<u32> {
        std::iter::once(self.tag_id)
            .chain(self.bytes.iter().map(|&b| b as u32))
            .collect()
    }
}

/// Per-script binomial prior and the anchor language it was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptConfig {
    pub script: ScriptId,
    pub beta: f64,
    pub anchor_language: String,
}

impl ScriptConfig {
    pub fn new(script: ScriptId, beta: f64, anchor_language: &str) -> Result<Self, CorpusError> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(CorpusError::InvalidArgument(format!("beta {beta} outside (0, 1]")));
        }
        Ok(ScriptConfig {
            script,
            beta,
            anchor_language: anchor_language.to_string(),
        })
    }

    /// Prior from the anchor language's sample: `beta = 1 / ratio`.
    pub fn from_anchor(script: ScriptId, anchor_language: &str, sample: &[CorpusDoc]) -> Result<Self, CorpusError> {
        let beta = derive_prior(byte_to_word_ratio(sample)?)?;
        Self::new(script, beta, anchor_language)
    }
}

/// Named prior combinations (Latin, Cyrillic, Indic).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorPreset {
    Dtp5x,
    Dtp10x,
    Magnet1x2x4x,
    Magnet3x6x12x,
    Magnet5x10x13x,
    Magnet5x10x15x,
    Magnet5x10x20x,
}

impl PriorPreset {
    pub fn betas(self) -> [f64; 3] {
        match self {
            PriorPreset::Dtp5x => [0.2, 0.2, 0.2],
            PriorPreset::Dtp10x => [0.1, 0.1, 0.1],
            PriorPreset::Magnet1x2x4x => [1.0, 0.5, 0.25],
            PriorPreset::Magnet3x6x12x => [0.33, 0.17, 0.083],
            PriorPreset::Magnet5x10x13x => [0.2, 0.10, 0.076],
            PriorPreset::Magnet5x10x15x => [0.2, 0.10, 0.066],
            PriorPreset::Magnet5x10x20x => [0.2, 0.10, 0.05],
        }
    }

    /// Script configs for the three built-in scripts, anchored on en/ru/te.
    pub fn script_configs(self) -> Vec<ScriptConfig> {
        let anchors = [
            (ScriptId::LATIN, "en"),
            (ScriptId::CYRILLIC, "ru"),
            (ScriptId::INDIC, "te"),
        ];
        anchors
            .iter()
            .zip(self.betas())
            .map(|(&(script, lang), beta)| ScriptConfig {
                script,
                beta,
                anchor_language: lang.to_string(),
            })
            .collect()
    }
}

/// One corpus document with its detected (or declared and verified) script.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub text: String,
    pub lang: String,
    pub script: ScriptId,
}

impl CorpusDoc {
    pub fn new(text: &str, lang: &str, declared: Option<ScriptId>, table: &ScriptTable) -> Result<Self, CorpusError> {
        let detected = table.detect(text)?;
        if let Some(declared) = declared {
            if declared != detected {
                return Err(CorpusError::ScriptMismatch { declared, detected });
            }
        }
        Ok(CorpusDoc {
            text: text.to_string(),
            lang: lang.to_string(),
            script: detected,
        })
    }

    pub fn byte_len(&self) -> usize {
        self.text.len()
    }
}

/// Whitespace-delimited word count; runs of whitespace collapse.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Mean over documents of UTF-8 byte length divided by word count.
pub fn byte_to_word_ratio(docs: &[CorpusDoc]) -> Result<f64, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut sum = 0.0;
    for (index, doc) in docs.iter().enumerate() {
        let words = count_words(&doc.text);
        if words == 0 {
            return Err(CorpusError::ZeroWords { index });
        }
        sum += doc.byte_len() as f64 / words as f64;
    }
    Ok(sum / docs.len() as f64)
}

/// Binomial prior for a script whose anchor averages `ratio` bytes per word.
pub fn derive_prior(ratio: f64) -> Result<f64, CorpusError> {
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    Ok((1.0 / ratio).clamp(f64::MIN_POSITIVE, 1.0))
}
