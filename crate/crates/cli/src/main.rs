use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use vqa_core::frame_ingest::VideoSample;
use vqa_core::harness::diagnostics::{model_grad_check, per_module};
use vqa_core::harness::eval::write_predictions;
use vqa_core::harness::train::{decoder, CONFIG_FILE};
use vqa_core::harness::{
    evaluate, generate_synthetic, load_model, load_samples, split_indices, train, SyntheticSpec, TrainConfig,
};
use vqa_core::mos2language::QualityMode;
use vqa_core::quality_head::{encode_mos, DecodeMode, ReferenceRatings};
use vqa_core::{Error, Result};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "vqa", version, about = "Video quality assessment with quality-language supervision")]
struct Cli {
    /// Training configuration (JSON with the TrainConfig keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (gen-data, train) or file (eval report, predict).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation crops per video.
    #[arg(long, global = true)]
    views: Option<usize>,
    #[arg(long, global = true)]
    quality_language: Option<QualityMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: manifest.jsonl plus one frame file per video.
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train on the 8:2 split of a manifest; writes checkpoints and the epoch log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report SROCC and PLCC for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Score every manifest entry instead of the held-out split.
        #[arg(long)]
        all: bool,
        /// Also write `id,pred,label` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        decode: Option<DecodeMode>,
    },
    /// Print one JSON line per video with its grade probabilities and score.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        decode: Option<DecodeMode>,
    },
    /// Finite-difference check of the training gradient, grouped by module.
    Gradcheck {
        /// Entries perturbed per parameter; all of them when omitted.
        #[arg(long)]
        entries: Option<usize>,
    },
    /// Print the target distribution for a score on the reference scale.
    EncodeMos { score: f64 },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Loads `path`, else `fallback` when it exists, else defaults; then applies flag overrides.
fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(p)) if p.is_file() => TrainConfig::load(p)?,
        _ => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(views) = cli.views {
        cfg.views = views;
    }
    if let Some(mode) = cli.quality_language {
        cfg.model.quality_language = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData {
            count,
            frames,
            height,
            width,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                count: *count,
                seed: cli.seed.unwrap_or(d.seed),
                frames: frames.unwrap_or(d.frames),
                height: height.unwrap_or(d.height),
                width: width.unwrap_or(d.width),
                ..d
            };
            let entries = generate_synthetic(&spec, &out)?;
            print_json(&json!({
                "manifest": out.join("manifest.jsonl"),
                "videos": entries.len(),
            }))?;
        }
        Command::Train { manifest, epochs } => {
            let mut cfg = load_config(&cli, None)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let (samples, range) = load_samples(manifest, cfg.mos_range)?;
            info!("training on {} videos for {} epochs", samples.len(), cfg.epochs);
            let outcome = train(&cfg, &samples, range, Some(&out))?;
            print_json(&json!({
                "out": out,
                "epochs": outcome.log.len(),
                "best_epoch": outcome.best_epoch,
                "mos_range": outcome.mos_range,
                "srocc": outcome.report.srocc,
                "plcc": outcome.report.plcc,
                "degenerate": outcome.report.degenerate,
            }))?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            all,
            csv,
            decode,
        } => {
            let mut cfg = load_config(&cli, checkpoint.parent().map(|p| p.join(CONFIG_FILE)).as_deref())?;
            if let Some(d) = decode {
                cfg.decode = *d;
            }
            let (model, range, svr_params) = load_model(&cfg, checkpoint)?;
            cfg.svr = svr_params;
            let (samples, _) = load_samples(manifest, Some(range))?;
            let chosen = select(&samples, &cfg, *all);
            let svr = decoder(&cfg, &model)?;
            let (report, _) = evaluate(&model, &chosen, cfg.views, cfg.decode, svr.as_ref())?;
            if let Some(path) = csv {
                report.write_csv(path)?;
            }
            let value = serde_json::to_value(&report)?;
            if let Some(path) = &cli.out {
                std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n").map_err(|source| Error::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
            print_json(&value)?;
        }
        Command::Predict {
            checkpoint,
            manifest,
            decode,
        } => {
            let mut cfg = load_config(&cli, checkpoint.parent().map(|p| p.join(CONFIG_FILE)).as_deref())?;
            if let Some(d) = decode {
                cfg.decode = *d;
            }
            let (model, range, svr_params) = load_model(&cfg, checkpoint)?;
            cfg.svr = svr_params;
            let (samples, _) = load_samples(manifest, Some(range))?;
            let chosen: Vec<&VideoSample> = samples.iter().collect();
            let svr = decoder(&cfg, &model)?;
            let records = chosen
                .iter()
                .map(|s| vqa_core::harness::eval::predict_sample(&model, s, cfg.views, cfg.decode, svr.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            match &cli.out {
                Some(path) => write_predictions(path, &records)?,
                None => {
                    for r in &records {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
            }
        }
        Command::Gradcheck { entries } => {
            let cfg = load_config(&cli, None)?;
            let report = model_grad_check(&cfg, *entries)?;
            let modules = per_module(&report);
            let max = report.max_rel_error();
            let pass = max < GRAD_TOLERANCE;
            print_json(&json!({
                "modules": modules,
                "max_rel_error": max,
                "tolerance": GRAD_TOLERANCE,
                "pass": pass,
            }))?;
            if !pass {
                return Ok(ExitCode::from(2));
            }
        }
        Command::EncodeMos { score } => {
            let cfg = load_config(&cli, None)?;
            let ratings = ReferenceRatings::standard(cfg.model.grades)?;
            let y = encode_mos(*score, &ratings).map_err(|e| Error::Usage(e.to_string()))?;
            print_json(&json!({ "score": score, "ratings": ratings.b, "encoding": y }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// The held-out split of `samples` under the config's seed, or all of them.
fn select<'a>(samples: &'a [VideoSample], cfg: &TrainConfig, all: bool) -> Vec<&'a VideoSample> {
    if all {
        return samples.iter().collect();
    }
    split_indices(samples.len(), cfg.split_ratio, cfg.seed)
        .test
        .iter()
        .map(|&i| &samples[i])
        .collect()
}
