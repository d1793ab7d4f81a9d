use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Parser, Subcommand};
use log::info;

use momentlight::ablate::{ablate, Axis};
use momentlight::config::RunConfig;
use momentlight::feature_store::{load_annotations, load_predictions, save_predictions};
use momentlight::metrics::evaluate;
use momentlight::synth::{generate_to_dir, SynthConfig};
use momentlight::train::{load_items, run, Trainer};
use momentlight::{Error, Result};

#[derive(Parser)]
#[command(name = "momentlight", version, about = "Joint moment retrieval and highlight detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark (annotations and features).
    GenerateData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Generator overrides, e.g. `--set snr=2 --set seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model; writes metrics.jsonl and checkpoint.safetensors to out.dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict with the averaged weights of a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Annotations to predict for; defaults to the checkpoint's validation split.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Feature directory; defaults to the checkpoint's.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Score predictions against annotations.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        very_good: u8,
    },
    /// Train every variant along one axis and tabulate the results.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Seeds per cell; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// JSON report path; a markdown table is printed either way.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::desk(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { out, overrides } => {
            let mut cfg = SynthConfig::default();
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            let layout = generate_to_dir(&cfg, &out)?;
            println!(
                "wrote {} items: {} and {} with features in {}",
                cfg.num_items,
                layout.train_annotations.display(),
                layout.val_annotations.display(),
                layout.feature_dir.display()
            );
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let outcome = run(&cfg)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            if let Some(e) = outcome.final_eval {
                println!("{}", serde_json::to_string_pretty(&e)?);
            }
        }
        Command::Predict {
            checkpoint,
            out,
            annotations,
            features,
        } => {
            let trainer = Trainer::load(&checkpoint)?;
            let c = &trainer.config;
            let ann = annotations.unwrap_or_else(|| c.val_annotations.clone());
            let feat = features.unwrap_or_else(|| c.feature_dir.clone());
            let items = load_items(&ann, &feat, c.clip_length, trainer.store.dtype())?;
            trainer.check_dims(&items)?;
            let preds = trainer.predict(&items)?;
            save_predictions(&preds, &out)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Evaluate {
            preds,
            gt,
            report,
            very_good,
        } => {
            let r = evaluate(&load_predictions(&preds)?, &load_annotations(&gt)?, very_good)?;
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Ablate {
            axis,
            config,
            overrides,
            seeds,
            report,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let train = load_items(&cfg.train_annotations, &cfg.feature_dir, cfg.clip_length, DType::F32)?;
            let val = load_items(&cfg.val_annotations, &cfg.feature_dir, cfg.clip_length, DType::F32)?;
            let result = ablate(&cfg, axis, &seeds, &train, &val, |r| {
                info!("{} seed {}: mAP avg {:.4}", r.label, r.seed, r.eval.mr.map_avg);
            })?;
            if let Some(path) = report {
                write_json(&path, &result)?;
            }
            print!("{}", result.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
