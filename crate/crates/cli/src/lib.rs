//! Commands behind the `scriptpool` binary. Each command takes a JSON run
//! config (defaults, then `--config FILE`, then `--set dotted.path=value`)
//! and writes CSV and JSON artifacts that embed that config.

pub mod analyze;
pub mod bench;
pub mod config;
pub mod gen_data;
mod output;
pub mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "scriptpool", version, about = "Script-routed byte-level segmentation: data, training, analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file, or any artifact with an embedded run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sentence-parallel corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated script names to emit.
        #[arg(long, value_delimiter = ',')]
        scripts: Option<Vec<String>>,
    },
    /// Train a model (magnet, dtp, byte) or a BPE tokenizer (bpe).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Token counts per language and parity against an anchor language.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `byte`, `bpe:<path>` or `checkpoint:<path>`; repeatable.
        #[arg(long = "segmenter")]
        segmenters: Vec<String>,
        #[arg(long)]
        anchor: Option<String>,
    },
    /// Wall-clock and middle-block flops relative to a byte-level model.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn path_set(key: &str, p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{key}={}", serde_json::Value::String(p.display().to_string())))
}

fn resolve<T>(cfg: &ConfigArgs, shortcuts: Vec<Option<String>>) -> anyhow::Result<Option<T>>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Default,
{
    // Shortcut flags apply first so that explicit --set wins.
    let mut sets: Vec<String> = shortcuts.into_iter().flatten().collect();
    sets.extend(cfg.sets.iter().cloned());
    let c: T = config::load(cfg.config.as_deref(), &sets)?;
    if cfg.print_config {
        println!("{}", serde_json::to_string_pretty(&c)?);
        return Ok(None);
    }
    Ok(Some(c))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out, seed, scripts } => {
            let shortcuts = vec![
                path_set("out_dir", &out),
                seed.map(|s| format!("seed={s}")),
                scripts.map(|s| format!("scripts={}", serde_json::to_string(&s).expect("strings serialize"))),
            ];
            if let Some(c) = resolve::<gen_data::GenDataConfig>(&cfg, shortcuts)? {
                let s = gen_data::run(&c)?;
                for sc in &s.scripts {
                    println!("{}: {} train docs, byte/word {:.3}, prior {:.4}", sc.script, sc.train_docs, sc.byte_to_word_ratio, sc.derived_prior);
                }
            }
        }
        Command::Train { cfg, corpus, out, mode } => {
            let shortcuts = vec![
                path_set("corpus", &corpus),
                path_set("out_dir", &out),
                mode.map(|m| format!("mode={m}")),
            ];
            if let Some(c) = resolve::<train::TrainRunConfig>(&cfg, shortcuts)? {
                match train::run(&c)? {
                    train::TrainOutcome::Model(s) => println!(
                        "{:?}: {} steps, ce {:.4} -> {:.4}, rates {:?}, checkpoint {}",
                        s.mode,
                        s.steps,
                        s.first_ce,
                        s.final_ce,
                        s.final_rates,
                        s.checkpoint.display()
                    ),
                    train::TrainOutcome::Bpe(s) => println!("bpe: {} merges, model {}", s.merges, s.model.display()),
                }
            }
        }
        Command::Analyze { cfg, corpus, out, segmenters, anchor } => {
            let mut shortcuts = vec![path_set("corpus", &corpus), path_set("out_dir", &out)];
            if !segmenters.is_empty() {
                shortcuts.push(Some(format!("segmenters={}", serde_json::to_string(&segmenters)?)));
            }
            shortcuts.push(anchor.map(|a| format!("anchor={}", serde_json::Value::String(a))));
            if let Some(c) = resolve::<analyze::AnalyzeRunConfig>(&cfg, shortcuts)? {
                let s = analyze::run(&c)?;
                for r in &s.reports {
                    for row in &r.rows {
                        println!("{}\t{}\t{:.2} tokens\tparity {:.3}", r.segmenter, row.lang, row.mean_tokens, row.parity);
                    }
                }
            }
        }
        Command::Bench { cfg, checkpoint, corpus, out } => {
            let shortcuts = vec![path_set("checkpoint", &checkpoint), path_set("corpus", &corpus), path_set("out_dir", &out)];
            if let Some(c) = resolve::<bench::BenchRunConfig>(&cfg, shortcuts)? {
                for r in bench::run(&c)?.rows {
                    println!(
                        "{}\t{}\t{:.3} ms\trelative time {:.3} ± {:.3}\trelative flops {:.3}",
                        r.lang, r.segmenter, r.ms_per_sentence, r.relative_time, r.relative_time_std, r.relative_flops
                    );
                }
            }
        }
    }
    Ok(())
}

/// Maps an outcome to the process exit code: 0 success, 1 usage, 2 runtime.
pub fn exit_code(result: &anyhow::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => ExitCode::from(1),
        Err(_) => ExitCode::from(2),
    }
}
