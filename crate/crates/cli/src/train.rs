use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::json;

use scriptpool::baselines::{alpha_sample_weights, bpe_train, dtp_config, BpeDoc, BpeTrainConfig};
use scriptpool::corpus::{make_batches_with, read_jsonl, Packing, PriorPreset};
use scriptpool::hourglass::{save_checkpoint, train, ModelError, TrainConfig};
use scriptpool::{CorpusDoc, Model, ModelConfig, ScriptConfig, ScriptTable};

use crate::config::UsageError;
use crate::output::{csv_with_config, ensure_dir, write_report};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Magnet,
    Dtp,
    Byte,
    Bpe,
}

/// Model shape and loss knobs; the script list comes from the priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub width: usize,
    pub ffn_width: usize,
    pub heads: usize,
    pub layers_first: usize,
    pub layers_middle: usize,
    pub layers_last: usize,
    pub max_len: usize,
    pub tau: f64,
    pub lambda: f64,
    pub init_std: f64,
    pub predictor_bias_init: f64,
    pub seed: u64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        let d = ModelConfig::desk(PriorPreset::Magnet5x10x20x.script_configs());
        ShapeConfig {
            width: d.width,
            ffn_width: d.ffn_width,
            heads: d.heads,
            layers_first: d.layers_first,
            layers_middle: d.layers_middle,
            layers_last: d.layers_last,
            max_len: d.max_len,
            tau: d.tau,
            lambda: d.lambda,
            init_std: d.init_std,
            predictor_bias_init: d.predictor_bias_init,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSettings {
    pub target_vocab: usize,
    pub alpha: f64,
    /// Documents drawn into the training stream; 0 means one per corpus document.
    pub samples: usize,
    pub seed: u64,
}

impl Default for BpeSettings {
    fn default() -> Self {
        BpeSettings { target_vocab: 1024, alpha: 0.3, samples: 0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub mode: Mode,
    /// Latin/Cyrillic/Indic priors for magnet mode.
    pub preset: PriorPreset,
    /// Explicit priors (Latin, Cyrillic, Indic); overrides `preset`.
    pub betas: Option<[f64; 3]>,
    pub dtp_beta: f64,
    pub packing: Packing,
    pub model: ShapeConfig,
    pub train: TrainConfig,
    pub bpe: BpeSettings,
    /// Log a progress line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            corpus: PathBuf::from("data/train.jsonl"),
            out_dir: PathBuf::from("runs/train"),
            mode: Mode::Magnet,
            preset: PriorPreset::Magnet5x10x20x,
            betas: None,
            dtp_beta: 0.2,
            packing: Packing::Concat,
            model: ShapeConfig::default(),
            train: TrainConfig::default(),
            bpe: BpeSettings::default(),
            log_every: 100,
        }
    }
}

impl TrainRunConfig {
    pub fn script_configs(&self) -> anyhow::Result<Vec<ScriptConfig>> {
        let mut s = self.preset.script_configs();
        if let Some(b) = self.betas {
            for (c, beta) in s.iter_mut().zip(b) {
                *c = ScriptConfig::new(c.script, beta, &c.anchor_language).map_err(|e| UsageError(e.to_string()))?;
            }
        }
        Ok(s)
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let m = &self.model;
        let base = ModelConfig {
            width: m.width,
            ffn_width: m.ffn_width,
            heads: m.heads,
            layers_first: m.layers_first,
            layers_middle: m.layers_middle,
            layers_last: m.layers_last,
            max_len: m.max_len,
            tau: m.tau,
            lambda: m.lambda,
            init_std: m.init_std,
            predictor_bias_init: m.predictor_bias_init,
            seed: m.seed,
            ..ModelConfig::desk(self.script_configs()?)
        };
        let cfg = match self.mode {
            Mode::Magnet => base,
            Mode::Dtp => dtp_config(self.dtp_beta, &base).map_err(|e| UsageError(e.to_string()))?,
            Mode::Byte => base.into_byte_level(),
            Mode::Bpe => return Err(UsageError("bpe mode has no model config".into()).into()),
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn read_corpus(path: &Path) -> anyhow::Result<Vec<CorpusDoc>> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let docs = read_jsonl(BufReader::new(f), &ScriptTable::default()).with_context(|| format!("reading {}", path.display()))?;
    if docs.is_empty() {
        anyhow::bail!("corpus {} is empty", path.display());
    }
    Ok(docs)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub params: usize,
    pub steps: usize,
    pub ln_vocab: f64,
    pub first_ce: f64,
    /// Mean CE over the last tenth of the steps.
    pub final_ce: f64,
    pub final_reg: f64,
    pub rate_columns: Vec<String>,
    /// Mean hard boundary rate per column over the last tenth of the steps.
    pub final_rates: Vec<Option<f64>>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub elapsed_secs: f64,
}

#[derive(Debug, Serialize)]
pub struct BpeSummary {
    pub merges: usize,
    pub vocab_size: usize,
    pub sampling_weights: Vec<(String, f64)>,
    pub model: PathBuf,
}

#[derive(Debug)]
pub enum TrainOutcome {
    Model(TrainSummary),
    Bpe(BpeSummary),
}

pub fn run(cfg: &TrainRunConfig) -> anyhow::Result<TrainOutcome> {
    let docs = read_corpus(&cfg.corpus)?;
    ensure_dir(&cfg.out_dir)?;
    let run_config = serde_json::to_value(cfg)?;
    if cfg.mode == Mode::Bpe {
        let s = run_bpe(cfg, &docs)?;
        write_report(&cfg.out_dir.join("summary.json"), "train", &run_config, &s)?;
        return Ok(TrainOutcome::Bpe(s));
    }

    let model_cfg = cfg.model_config()?;
    let vocab = model_cfg.vocab();
    let batches = make_batches_with(&docs, model_cfg.max_len, cfg.train.batch_size, cfg.train.seed, &vocab, cfg.packing)?;
    let mut model = Model::<f32>::new(model_cfg.clone())?;
    let columns: Vec<String> = (0..model_cfg.predictors().len().max(1)).map(|i| model_cfg.predictor_name(i)).collect();
    log::info!("training {:?}: {} params, {} batches", cfg.mode, model.num_params(), batches.len());

    let metrics = cfg.out_dir.join("metrics.csv");
    let mut w = csv_with_config(&metrics, &run_config)?;
    let mut header = vec!["step".to_string(), "ce_loss".into(), "reg_loss".into()];
    header.extend(columns.iter().map(|c| format!("boundary_rate_{c}")));
    w.write_record(&header)?;

    let t0 = Instant::now();
    let mut io_err = None;
    let result = train(&mut model, &batches, &cfg.train, |l| {
        let mut rec = vec![l.step.to_string(), l.ce.to_string(), l.reg.to_string()];
        rec.extend(l.boundary_rates.iter().map(|r| r.map_or(String::new(), |x| x.to_string())));
        if let Err(e) = w.write_record(&rec) {
            io_err.get_or_insert(e);
        }
        if cfg.log_every > 0 && (l.step % cfg.log_every == 0 || l.step + 1 == cfg.train.steps) {
            log::info!("step {} ce {:.4} reg {:.4} rates {:?}", l.step, l.ce, l.reg, l.boundary_rates);
        }
    });
    w.flush()?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics");
    }
    let logs = match result {
        Ok(l) => l,
        Err(e @ ModelError::NonFiniteLoss { step }) => {
            log::error!("non-finite loss at step {step}; metrics up to that step are in {}", metrics.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    let checkpoint = cfg.out_dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint, &model, &json!({ "run_config": run_config, "mode": cfg.mode }))?;

    let tail = &logs[logs.len() - logs.len().div_ceil(10)..];
    let mean = |f: &dyn Fn(&scriptpool::hourglass::StepLog) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    let final_rates = (0..columns.len())
        .map(|c| {
            let xs: Vec<f64> = tail.iter().filter_map(|l| l.boundary_rates[c]).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect();
    let summary = TrainSummary {
        mode: cfg.mode,
        params: model.num_params(),
        steps: logs.len(),
        ln_vocab: (model_cfg.vocab_size as f64).ln(),
        first_ce: logs[0].ce,
        final_ce: mean(&|l| l.ce),
        final_reg: mean(&|l| l.reg),
        rate_columns: columns,
        final_rates,
        checkpoint,
        metrics,
        elapsed_secs: t0.elapsed().as_secs_f64(),
    };
    write_report(&cfg.out_dir.join("summary.json"), "train", &run_config, &summary)?;
    Ok(TrainOutcome::Model(summary))
}

fn run_bpe(cfg: &TrainRunConfig, docs: &[CorpusDoc]) -> anyhow::Result<BpeSummary> {
    let mut counts: Vec<(String, f64)> = Vec::new();
    for d in docs {
        match counts.iter_mut().find(|(l, _)| *l == d.lang) {
            Some((_, n)) => *n += d.byte_len() as f64,
            None => counts.push((d.lang.clone(), d.byte_len() as f64)),
        }
    }
    let weights = alpha_sample_weights(&counts, cfg.bpe.alpha).map_err(|e| UsageError(e.to_string()))?;
    let bdocs: Vec<BpeDoc> = docs.iter().map(|d| BpeDoc { lang: &d.lang, bytes: d.text.as_bytes() }).collect();
    let samples = if cfg.bpe.samples == 0 { docs.len() } else { cfg.bpe.samples };
    let model = bpe_train(
        &bdocs,
        &weights,
        &BpeTrainConfig { target_vocab: cfg.bpe.target_vocab, samples, seed: cfg.bpe.seed },
    )?;
    let path = cfg.out_dir.join("bpe.json");
    fs::write(&path, model.to_json()).with_context(|| format!("writing {}", path.display()))?;
    Ok(BpeSummary {
        merges: model.merges().len(),
        vocab_size: model.vocab_size(),
        sampling_weights: weights.langs.into_iter().zip(weights.q).collect(),
        model: path,
    })
}
