//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use scriptpool::corpus::{PriorPreset, SyntheticSpec};
use scriptpool::{CorpusDoc, Model, ModelConfig, ScriptId};

/// Parallel synthetic sentences with byte-to-word ratios near 5, 10 and 20.
pub fn parallel_corpus(sentences: usize) -> Vec<CorpusDoc> {
    let bpw: BTreeMap<ScriptId, usize> = [(ScriptId::LATIN, 4), (ScriptId::CYRILLIC, 10), (ScriptId::INDIC, 18)].into();
    SyntheticSpec::new(sentences, 6, bpw, 0).generate().expect("valid spec")
}

/// Freshly initialised desk-size model and its byte-level twin.
pub fn desk_models() -> (Model<f32>, Model<f32>) {
    let cfg = ModelConfig::desk(PriorPreset::Magnet5x10x20x.script_configs());
    let magnet = Model::new(cfg.clone()).expect("desk config is valid");
    let byte = Model::new(cfg.into_byte_level()).expect("desk config is valid");
    (magnet, byte)
}

/// `[tag, bytes...]` for a document.
pub fn row_of(model: &Model<f32>, doc: &CorpusDoc) -> Vec<u32> {
    std::iter::once(model.config().vocab().tag_id(doc.script)).chain(doc.text.bytes().map(u32::from)).collect()
}
