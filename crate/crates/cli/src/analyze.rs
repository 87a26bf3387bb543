use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use scriptpool::analysis::{middle_block_report, segmentation_report, FlopRow, SegmentationReport};
use scriptpool::baselines::{BpeModel, Segmenter};
use scriptpool::hourglass::load_checkpoint;
use scriptpool::{CorpusDoc, ScriptId};

use crate::config::UsageError;
use crate::output::{csv_with_config, ensure_dir, write_report};
use crate::train::read_corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeRunConfig {
    /// Sentence-parallel JSONL corpus.
    pub corpus: PathBuf,
    /// Each entry is `byte`, `bpe:<model.json>` or `checkpoint:<file>`.
    pub segmenters: Vec<String>,
    /// Reference language for parity; defaults to the first Latin-script language.
    pub anchor: Option<String>,
    pub out_dir: PathBuf,
}

impl Default for AnalyzeRunConfig {
    fn default() -> Self {
        AnalyzeRunConfig {
            corpus: PathBuf::from("data/eval.jsonl"),
            segmenters: vec!["byte".into()],
            anchor: None,
            out_dir: PathBuf::from("runs/analyze"),
        }
    }
}

pub fn load_segmenter(spec: &str) -> anyhow::Result<Segmenter> {
    if spec == "byte" {
        return Ok(Segmenter::Byte);
    }
    match spec.split_once(':') {
        Some(("bpe", path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading BPE model {path}"))?;
            Ok(Segmenter::Bpe(BpeModel::from_json(&text)?))
        }
        Some(("checkpoint", path)) => {
            let (model, _) = load_checkpoint::<f32>(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?;
            Ok(Segmenter::Model(Box::new(model)))
        }
        _ => Err(UsageError(format!("unknown segmenter {spec:?}; expected byte, bpe:<path> or checkpoint:<path>")).into()),
    }
}

pub fn default_anchor(docs: &[CorpusDoc]) -> Option<String> {
    docs.iter()
        .find(|d| d.script == ScriptId::LATIN)
        .or_else(|| docs.first())
        .map(|d| d.lang.clone())
}

#[derive(Debug, Serialize)]
pub struct MiddleBlock {
    pub segmenter: String,
    pub rows: Vec<FlopRow>,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeSummary {
    pub anchor: String,
    pub reports: Vec<SegmentationReport>,
    /// Middle-block cost relative to a byte-level model, for model segmenters.
    pub middle_block: Vec<MiddleBlock>,
}

pub fn run(cfg: &AnalyzeRunConfig) -> anyhow::Result<AnalyzeSummary> {
    let docs = read_corpus(&cfg.corpus)?;
    let anchor = match &cfg.anchor {
        Some(a) => a.clone(),
        None => default_anchor(&docs).expect("corpus is non-empty"),
    };
    if cfg.segmenters.is_empty() {
        return Err(UsageError("no segmenters configured".into()).into());
    }
    let mut reports = Vec::new();
    let mut middle_block = Vec::new();
    for spec in &cfg.segmenters {
        let seg = load_segmenter(spec)?;
        let mut report = segmentation_report(&seg, &docs, &anchor)?;
        report.segmenter = spec.clone();
        if let Segmenter::Model(m) = &seg {
            middle_block.push(MiddleBlock { segmenter: spec.clone(), rows: middle_block_report(m, &docs)? });
        }
        log::info!("{spec}: {}", report.rows.iter().map(|r| format!("{} {:.3}", r.lang, r.parity)).collect::<Vec<_>>().join(", "));
        reports.push(report);
    }

    ensure_dir(&cfg.out_dir)?;
    let run_config = serde_json::to_value(cfg)?;
    let mut w = csv_with_config(&cfg.out_dir.join("report.csv"), &run_config)?;
    w.write_record(["segmenter", "lang", "script", "mean_tokens", "mean_bytes", "parity"])?;
    for r in &reports {
        for row in &r.rows {
            w.write_record([
                r.segmenter.clone(),
                row.lang.clone(),
                row.script.to_string(),
                row.mean_tokens.to_string(),
                row.mean_bytes.to_string(),
                row.parity.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let summary = AnalyzeSummary { anchor, reports, middle_block };
    write_report(&cfg.out_dir.join("report.json"), "analyze", &run_config, &summary)?;
    Ok(summary)
}
