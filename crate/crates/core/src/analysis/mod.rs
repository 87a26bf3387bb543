//! Token-count parity across parallel languages and middle-block cost estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{char_chunks, BaselineError, Segmenter};
use crate::corpus::{CorpusDoc, ScriptId};
use crate::hourglass::{Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("corpus is not sentence-parallel: {lang} has {got} sentences, {anchor} has {expected}")]
    NonParallelCorpus { lang: String, got: usize, expected: usize, anchor: String },
    #[error("anchor language {0} not present in the corpus")]
    MissingAnchor(String),
    #[error("anchor language {0} has zero mean tokens")]
    EmptyAnchor(String),
    #[error("language {0} mixes scripts")]
    MixedScripts(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub lang: String,
    pub script: ScriptId,
    pub sentences: usize,
    pub mean_tokens: f64,
    pub mean_bytes: f64,
    pub parity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub segmenter: String,
    pub anchor: String,
    pub rows: Vec<LanguageRow>,
}

impl SegmentationReport {
    pub fn row(&self, lang: &str) -> Option<&LanguageRow> {
        self.rows.iter().find(|r| r.lang == lang)
    }
}

/// Documents grouped by language, ordered by (script, lang).
fn group_by_lang(docs: &[CorpusDoc]) -> Result<BTreeMap<(ScriptId, String), Vec<&CorpusDoc>>, AnalysisError> {
    let mut script_of: BTreeMap<&str, ScriptId> = BTreeMap::new();
    let mut groups: BTreeMap<(ScriptId, String), Vec<&CorpusDoc>> = BTreeMap::new();
    for d in docs {
        if *script_of.entry(d.lang.as_str()).or_insert(d.script) != d.script {
            return Err(AnalysisError::MixedScripts(d.lang.clone()));
        }
        groups.entry((d.script, d.lang.clone())).or_default().push(d);
    }
    Ok(groups)
}

/// Mean tokens per sentence for every language and parity against `anchor`.
/// All languages must hold the same number of sentences.
pub fn segmentation_report(segmenter: &Segmenter, docs: &[CorpusDoc], anchor: &str) -> Result<SegmentationReport, AnalysisError> {
    let groups = group_by_lang(docs)?;
    if groups.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let expected = groups
        .iter()
        .find(|((_, l), _)| l == anchor)
        .map(|(_, g)| g.len())
        .ok_or_else(|| AnalysisError::MissingAnchor(anchor.to_string()))?;
    for ((_, lang), g) in &groups {
        if g.len() != expected {
            return Err(AnalysisError::NonParallelCorpus {
                lang: lang.clone(),
                got: g.len(),
                expected,
                anchor: anchor.to_string(),
            });
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((script, lang), g) in &groups {
        let mut tokens = 0usize;
        let mut bytes = 0usize;
        for d in g {
            tokens += segmenter.segment_count(&d.text, d.script)?;
            bytes += d.text.len();
        }
        let n = g.len() as f64;
        rows.push(LanguageRow {
            lang: lang.clone(),
            script: *script,
            sentences: g.len(),
            mean_tokens: tokens as f64 / n,
            mean_bytes: bytes as f64 / n,
            parity: f64::NAN,
        });
    }
    let base = rows.iter().find(|r| r.lang == anchor).expect("anchor checked above").mean_tokens;
    if base <= 0.0 {
        return Err(AnalysisError::EmptyAnchor(anchor.to_string()));
    }
    for r in &mut rows {
        r.parity = if r.lang == anchor { 1.0 } else { r.mean_tokens / base };
    }
    Ok(SegmentationReport { segmenter: segmenter.name().to_string(), anchor: anchor.to_string(), rows })
}

/// Multiply-add count (two flops each) of the middle block on `tokens` pooled
/// rows: QKV and output projections, score and mixing products, and the FFN.
pub fn middle_block_flops(cfg: &ModelConfig, tokens: usize) -> f64 {
    let (m, d, f) = (tokens as f64, cfg.width as f64, cfg.ffn_width as f64);
    let per_layer = 4.0 * m * d * d + 2.0 * m * m * d + 2.0 * m * d * f;
    2.0 * per_layer * cfg.layers_middle as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub lang: String,
    pub script: ScriptId,
    /// Mean middle-block flops per sentence under the model's segmentation.
    pub model_flops: f64,
    /// Same shape, one pooled row per byte.
    pub byte_flops: f64,
    pub ratio: f64,
    /// Mean content segments and bytes per sentence.
    pub mean_segments: f64,
    pub mean_bytes: f64,
}

/// Middle-block cost of `model` against a byte-level model of the same shape.
/// Each window counts its tag row, so a window with `m` segments costs
/// `middle_block_flops(1 + m)` against `1 + N` for its `N` bytes.
pub fn middle_block_report(model: &Model<f32>, docs: &[CorpusDoc]) -> Result<Vec<FlopRow>, AnalysisError> {
    let cfg = model.config();
    let vocab = cfg.vocab();
    let mut out = Vec::new();
    for ((script, lang), g) in group_by_lang(docs)? {
        let (mut mf, mut bf, mut segs, mut bytes) = (0.0, 0.0, 0usize, 0usize);
        for d in &g {
            for chunk in char_chunks(&d.text, cfg.max_len) {
                let row: Vec<u32> = std::iter::once(vocab.tag_id(script)).chain(chunk.bytes().map(u32::from)).collect();
                let m = model.segment(&row)?.m;
                mf += middle_block_flops(cfg, 1 + m);
                bf += middle_block_flops(cfg, 1 + chunk.len());
                segs += m;
                bytes += chunk.len();
            }
        }
        let n = g.len() as f64;
        out.push(FlopRow {
            lang,
            script,
            model_flops: mf / n,
            byte_flops: bf / n,
            ratio: mf / bf,
            mean_segments: segs as f64 / n,
            mean_bytes: bytes as f64 / n,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::BpeModel;
    use crate::corpus::{PriorPreset, ScriptTable};

    fn doc(text: &str, lang: &str) -> CorpusDoc {
        CorpusDoc::new(text, lang, None, &ScriptTable::default()).unwrap()
    }

    fn parallel() -> Vec<CorpusDoc> {
        vec![
            doc("Fellow wrestlers also paid tribute to Luna.", "en"),
            doc("తోటి మల్ల యుద్ధకారులు కూడా లూనాకు నివాళులు అర్పించారు.", "te"),
            doc("short one", "en"),
            doc("చిన్న", "te"),
        ]
    }

    #[test]
    fn byte_parity_is_byte_ratio() {
        let docs = &parallel()[..2];
        let r = segmentation_report(&Segmenter::Byte, docs, "en").unwrap();
        assert_eq!(r.row("en").unwrap().parity, 1.0);
        assert_eq!(r.row("en").unwrap().mean_tokens, 43.0);
        assert!((r.row("te").unwrap().parity - 148.0 / 43.0).abs() < 1e-12);
        assert_eq!(r.segmenter, "byte");
    }

    #[test]
    fn means_over_all_sentences() {
        let r = segmentation_report(&Segmenter::Bpe(BpeModel::default()), &parallel(), "en").unwrap();
        let en = r.row("en").unwrap();
        assert_eq!(en.sentences, 2);
        assert_eq!(en.mean_tokens, (43.0 + 9.0) / 2.0);
        assert_eq!(en.mean_bytes, en.mean_tokens);
        assert_eq!(r.rows.iter().map(|r| r.script).collect::<Vec<_>>(), vec![ScriptId::LATIN, ScriptId::INDIC]);
    }

    #[test]
    fn corpus_errors() {
        let mut docs = parallel();
        docs.pop();
        assert!(matches!(segmentation_report(&Segmenter::Byte, &docs, "en"), Err(AnalysisError::NonParallelCorpus { .. })));
        assert!(matches!(segmentation_report(&Segmenter::Byte, &parallel(), "ru"), Err(AnalysisError::MissingAnchor(_))));
        assert!(matches!(segmentation_report(&Segmenter::Byte, &[], "en"), Err(AnalysisError::EmptyCorpus)));
        let mixed = vec![doc("abc", "x"), doc("абв", "x")];
        assert!(matches!(segmentation_report(&Segmenter::Byte, &mixed, "x"), Err(AnalysisError::MixedScripts(_))));
    }

    #[test]
    fn flop_formula() {
        let cfg = ModelConfig::desk(PriorPreset::Magnet5x10x20x.script_configs());
        // d=64, f=256, 2 layers, M=10: 2*2*(4*10*4096 + 2*100*64 + 2*10*64*256)
        assert_eq!(middle_block_flops(&cfg, 10), 4.0 * (163_840.0 + 12_800.0 + 327_680.0));
        assert_eq!(middle_block_flops(&cfg, 0), 0.0);
    }

    #[test]
    fn byte_model_ratio_is_one() {
        let mut cfg = ModelConfig::desk(PriorPreset::Magnet5x10x20x.script_configs()).into_byte_level();
        cfg.width = 8;
        cfg.ffn_width = 16;
        cfg.heads = 2;
        let m = Model::new(cfg).unwrap();
        for r in middle_block_report(&m, &parallel()).unwrap() {
            assert_eq!(r.ratio, 1.0);
            assert_eq!(r.mean_segments, r.mean_bytes);
        }
    }
}
