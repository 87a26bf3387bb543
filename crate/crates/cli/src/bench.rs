use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use scriptpool::analysis::{middle_block_flops, middle_block_report};
use scriptpool::baselines::char_chunks;
use scriptpool::hourglass::load_checkpoint;
use scriptpool::{CorpusDoc, Model, ScriptId};

use crate::output::{csv_with_config, ensure_dir, write_report};
use crate::train::read_corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchRunConfig {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Untimed passes before measuring.
    pub warmup: usize,
    /// Timed passes; mean and standard deviation are reported over these.
    pub repeats: usize,
    /// Sentences per language (0 = all).
    pub max_sentences: usize,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        BenchRunConfig {
            checkpoint: PathBuf::from("runs/train/checkpoint.bin"),
            corpus: PathBuf::from("data/eval.jsonl"),
            out_dir: PathBuf::from("runs/bench"),
            warmup: 1,
            repeats: 5,
            max_sentences: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub lang: String,
    pub script: ScriptId,
    pub segmenter: String,
    pub ms_per_sentence: f64,
    pub ms_per_sentence_std: f64,
    /// Wall-clock relative to the byte-level model, per repeat then averaged.
    pub relative_time: f64,
    pub relative_time_std: f64,
    /// Analytic middle-block flops per sentence.
    pub middle_flops: f64,
    pub relative_flops: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Seconds per sentence for one noise-free forward pass over `docs`.
fn time_pass(model: &Model<f32>, rows: &[Vec<u32>], sentences: usize) -> anyhow::Result<f64> {
    let t = Instant::now();
    for r in rows {
        std::hint::black_box(model.forward(r, scriptpool::hourglass::BoundaryNoise::Threshold)?);
    }
    Ok(t.elapsed().as_secs_f64() / sentences as f64)
}

fn rows_of(model: &Model<f32>, docs: &[&CorpusDoc]) -> Vec<Vec<u32>> {
    let cfg = model.config();
    let vocab = cfg.vocab();
    docs.iter()
        .flat_map(|d| {
            char_chunks(&d.text, cfg.max_len)
                .into_iter()
                .map(|c| std::iter::once(vocab.tag_id(d.script)).chain(c.bytes().map(u32::from)).collect())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn run(cfg: &BenchRunConfig) -> anyhow::Result<BenchSummary> {
    let (model, _) = load_checkpoint::<f32>(Path::new(&cfg.checkpoint)).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let byte = Model::<f32>::new(model.config().clone().into_byte_level())?;
    let docs = read_corpus(&cfg.corpus)?;
    let mut by_lang: BTreeMap<(ScriptId, String), Vec<&CorpusDoc>> = BTreeMap::new();
    for d in &docs {
        let g = by_lang.entry((d.script, d.lang.clone())).or_default();
        if cfg.max_sentences == 0 || g.len() < cfg.max_sentences {
            g.push(d);
        }
    }
    let repeats = cfg.repeats.max(1);
    let mut rows = Vec::new();
    for ((script, lang), group) in &by_lang {
        let model_rows = rows_of(&model, group);
        let byte_rows = rows_of(&byte, group);
        for _ in 0..cfg.warmup {
            time_pass(&model, &model_rows, group.len())?;
            time_pass(&byte, &byte_rows, group.len())?;
        }
        let (mut mt, mut bt) = (Vec::new(), Vec::new());
        for _ in 0..repeats {
            mt.push(time_pass(&model, &model_rows, group.len())?);
            bt.push(time_pass(&byte, &byte_rows, group.len())?);
        }
        let rel: Vec<f64> = mt.iter().zip(&bt).map(|(m, b)| m / b).collect();
        let owned: Vec<CorpusDoc> = group.iter().map(|d| (*d).clone()).collect();
        let flops = middle_block_report(&model, &owned)?.remove(0);
        let byte_flops = byte_rows.iter().map(|r| middle_block_flops(byte.config(), r.len())).sum::<f64>() / group.len() as f64;
        let (bm, bs) = mean_std(&bt);
        rows.push(BenchRow {
            lang: lang.clone(),
            script: *script,
            segmenter: "byte".into(),
            ms_per_sentence: bm * 1e3,
            ms_per_sentence_std: bs * 1e3,
            relative_time: 1.0,
            relative_time_std: 0.0,
            middle_flops: byte_flops,
            relative_flops: 1.0,
        });
        let (mm, ms) = mean_std(&mt);
        let (rm, rs) = mean_std(&rel);
        rows.push(BenchRow {
            lang: lang.clone(),
            script: *script,
            segmenter: "model".into(),
            ms_per_sentence: mm * 1e3,
            ms_per_sentence_std: ms * 1e3,
            relative_time: rm,
            relative_time_std: rs,
            middle_flops: flops.model_flops,
            relative_flops: flops.ratio,
        });
    }

    ensure_dir(&cfg.out_dir)?;
    let run_config = serde_json::to_value(cfg)?;
    let mut w = csv_with_config(&cfg.out_dir.join("bench.csv"), &run_config)?;
    w.write_record([
        "lang",
        "script",
        "segmenter",
        "ms_per_sentence",
        "ms_per_sentence_std",
        "relative_time",
        "relative_time_std",
        "middle_flops",
        "relative_flops",
    ])?;
    for r in &rows {
        w.write_record([
            r.lang.clone(),
            r.script.to_string(),
            r.segmenter.clone(),
            r.ms_per_sentence.to_string(),
            r.ms_per_sentence_std.to_string(),
            r.relative_time.to_string(),
            r.relative_time_std.to_string(),
            r.middle_flops.to_string(),
            r.relative_flops.to_string(),
        ])?;
    }
    w.flush()?;
    let summary = BenchSummary { rows };
    write_report(&cfg.out_dir.join("bench.json"), "bench", &run_config, &summary)?;
    Ok(summary)
}
