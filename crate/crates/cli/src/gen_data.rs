use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use scriptpool::corpus::{byte_to_word_ratio, derive_prior, write_jsonl, SyntheticSpec};
use scriptpool::{CorpusDoc, ScriptTable};

use crate::config::UsageError;
use crate::output::{ensure_dir, write_report};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub out_dir: PathBuf,
    /// Parallel sentences in `train.jsonl`.
    pub sentences: usize,
    /// Further parallel sentences in `eval.jsonl`, drawn from the same lexicons.
    pub eval_sentences: usize,
    pub words_per_sentence: usize,
    pub lexicon_size: usize,
    pub bytes_per_word: BTreeMap<String, usize>,
    /// Scripts to emit; empty means every script in `bytes_per_word`.
    pub scripts: Vec<String>,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            out_dir: PathBuf::from("data"),
            sentences: 800,
            eval_sentences: 100,
            words_per_sentence: 6,
            lexicon_size: 128,
            bytes_per_word: [("latin".to_string(), 4), ("cyrillic".to_string(), 10), ("indic".to_string(), 18)].into(),
            scripts: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ScriptSummary {
    pub script: String,
    pub lang: String,
    pub train_docs: usize,
    pub eval_docs: usize,
    pub train_bytes: usize,
    pub byte_to_word_ratio: f64,
    pub derived_prior: f64,
}

#[derive(Debug, Serialize)]
pub struct GenDataSummary {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub scripts: Vec<ScriptSummary>,
}

pub fn run(cfg: &GenDataConfig) -> anyhow::Result<GenDataSummary> {
    let table = ScriptTable::default();
    let mut bpw = BTreeMap::new();
    for (name, &bytes) in &cfg.bytes_per_word {
        if !cfg.scripts.is_empty() && !cfg.scripts.contains(name) {
            continue;
        }
        let id = table.by_name(name).ok_or_else(|| UsageError(format!("unknown script {name:?}")))?;
        bpw.insert(id, bytes);
    }
    for name in &cfg.scripts {
        if !cfg.bytes_per_word.contains_key(name) {
            return Err(UsageError(format!("script {name:?} has no bytes_per_word entry")).into());
        }
    }
    if bpw.is_empty() {
        return Err(UsageError("no scripts selected".into()).into());
    }
    let n_scripts = bpw.len();
    let spec = SyntheticSpec {
        n_sentences: cfg.sentences + cfg.eval_sentences,
        words_per_sentence: cfg.words_per_sentence,
        bytes_per_word: bpw,
        lexicon_size: cfg.lexicon_size,
        seed: cfg.seed,
    };
    let docs = spec.generate()?;
    let (train, eval) = docs.split_at(cfg.sentences * n_scripts);

    ensure_dir(&cfg.out_dir)?;
    let train_path = cfg.out_dir.join("train.jsonl");
    let eval_path = cfg.out_dir.join("eval.jsonl");
    for (path, part) in [(&train_path, train), (&eval_path, eval)] {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_jsonl(BufWriter::new(f), part, &table)?;
    }

    let mut scripts = Vec::new();
    for &id in spec.bytes_per_word.keys() {
        let of = |part: &[CorpusDoc]| part.iter().filter(|d| d.script == id).cloned().collect::<Vec<_>>();
        let (t, e) = (of(train), of(eval));
        let ratio = byte_to_word_ratio(if t.is_empty() { &e } else { &t })?;
        scripts.push(ScriptSummary {
            script: id.to_string(),
            lang: SyntheticSpec::lang_label(id),
            train_docs: t.len(),
            eval_docs: e.len(),
            train_bytes: t.iter().map(|d| d.byte_len()).sum(),
            byte_to_word_ratio: ratio,
            derived_prior: derive_prior(ratio)?,
        });
    }
    let summary = GenDataSummary { train: train_path, eval: eval_path, scripts };
    write_report(&cfg.out_dir.join("manifest.json"), "gen-data", &serde_json::to_value(cfg)?, &summary)?;
    Ok(summary)
}
