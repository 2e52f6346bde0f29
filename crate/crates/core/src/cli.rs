//! `dcl` command line: `synth`, `train`, `eval`, `report` and `xgen`.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 1
//! for any other failure. Logs go to stderr; every output path is a flag.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::data::{generate_corpus, load_dataset, ManipKind};
use crate::error::{DclError, Result};
use crate::eval::{evaluate, report};
use crate::experiment::cross_manipulation;
use crate::trainer::{load_checkpoint, resume, train, TrainOutputs};

#[derive(Debug, Parser)]
#[command(name = "dcl", version, about = "Dual contrastive forgery detection on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus from the [corpus] section of a config file.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `section.key=value`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train on a corpus directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// With --resume: train until this many epochs are complete.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a corpus with a checkpoint and print frame/video metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write metrics, self-similarity CSVs, embeddings and histograms.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-manipulation experiment with a cross-entropy-only baseline arm.
    Xgen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        train_family: Option<ManipKind>,
        #[arg(long, value_parser = parse_kind)]
        test_family: Option<ManipKind>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Result JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ManipKind, String> {
    s.parse::<ManipKind>().map_err(|e| e.to_string())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DclError::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| DclError::io(path, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out, set } => {
            let config = Config::load(spec.as_deref(), &set)?;
            let videos = generate_corpus(&config.corpus, &out)?;
            write_json(&out.join("corpus.json"), &config.corpus)?;
            log::info!("wrote {} videos to {}", videos.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            log: log_path,
            resume: from,
            epochs,
            set,
        } => {
            let dataset = load_dataset(&data)?;
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                loss_log: log_path,
            };
            let state = match from {
                Some(ckpt) => {
                    let mut state = load_checkpoint(&ckpt)?;
                    if let Some(e) = epochs {
                        state.config.run.epochs = e;
                    }
                    resume(state, &dataset, &outputs)?
                }
                None => {
                    let cfg = Config::load(config.as_deref(), &set)?;
                    train(cfg.train_config(), &dataset, &outputs)?
                }
            };
            log::info!("checkpoint after epoch {} written to {}", state.epoch, out.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let state = load_checkpoint(&checkpoint)?;
            let metrics = evaluate(&state.model, &load_dataset(&data)?)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            if let Some(path) = out {
                write_json(&path, &metrics)?;
            }
        }
        Command::Report { checkpoint, data, out } => {
            let state = load_checkpoint(&checkpoint)?;
            let metrics = report(&state.model, &load_dataset(&data)?, &out)?;
            write_json(
                &out.join("manifest.json"),
                &serde_json::json!({
                    "checkpoint": checkpoint.display().to_string(),
                    "data": data.display().to_string(),
                    "config": state.config,
                }),
            )?;
            log::info!("frame AUC {:.4}, video AUC {:.4}", metrics.auc_frame, metrics.auc_video);
        }
        Command::Xgen {
            config,
            train_family,
            test_family,
            seeds,
            out,
            set,
        } => {
            let mut cfg = Config::load(config.as_deref(), &set)?;
            if let Some(f) = train_family {
                cfg.xgen.train_family = f;
            }
            if let Some(f) = test_family {
                cfg.xgen.test_family = f;
            }
            if let Some(s) = seeds {
                cfg.xgen.seeds = s;
            }
            cfg.validate()?;
            let result = cross_manipulation(&cfg.corpus, &cfg.train_config(), &cfg.xgen)?;
            write_json(&out, &result)?;
            println!(
                "dcl unseen AUC {:.4}, baseline {:.4}, gain {:+.4}",
                result.dcl_summary.median_unseen_auc, result.ce_baseline_summary.median_unseen_auc, result.unseen_auc_gain
            );
        }
    }
    Ok(())
}

/// Parse `argv` (program name first), run the subcommand, return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DclError::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}
