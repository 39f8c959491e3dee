//! Single command-line entry point for the whole pipeline: synthetic data
//! generation, training, inference, one-to-many sampling, and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use clap::{Parser, Subcommand, ValueEnum};
use lumen::checkpoint::Checkpoint;
use lumen::config::{load_config, DataConfig, TrainConfig};
use lumen::error::Error;
use lumen::eval::evaluate_mask_dirs;
use lumen::infer::{infer_dir, sample_variations, SampleDomain};
use lumen::synth::dataset::generate_dataset;
use lumen::train::train;
use serde::Serialize;
use std::path::{Path, PathBuf};

fn key_help(keys: &[(&str, &str)]) -> String {
    let mut s = String::from("Config keys (file or --override, defaults in brackets):\n");
    for (k, desc) in keys {
        s.push_str(&format!("  {k:<20} {desc}\n"));
    }
    s
}

fn train_key_help() -> String {
    key_help(TrainConfig::KEY_HELP)
}

fn data_key_help() -> String {
    key_help(DataConfig::KEY_HELP)
}

#[derive(Parser)]
#[command(
    name = "lumen",
    version,
    about = "Unpaired OC<->VC colonoscopy translation with missed-surface overlays"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    /// input frame is a VC render (encoded directly)
    Vc,
    /// input frame is an OC image (encoded through the VC-side encoder)
    Oc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic fold-tube dataset with exact missed-surface masks
    #[command(name = "gen-data", after_help = data_key_help())]
    GenData {
        /// config file of `key = value` lines
        #[arg(long)]
        config: Option<PathBuf>,
        /// config override, repeatable
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the translation model on an unpaired dataset
    #[command(after_help = train_key_help())]
    Train {
        /// config file of `key = value` lines
        #[arg(long)]
        config: Option<PathBuf>,
        /// config override, repeatable
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// dataset root (the gen-data output directory)
        #[arg(long)]
        data: PathBuf,
        /// output directory for checkpoints and the loss CSV
        #[arg(long)]
        out: PathBuf,
        /// checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a directory of OC frames to VC images, masks, and overlays
    Infer {
        /// trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// directory of input PNG frames
        #[arg(long)]
        input: PathBuf,
        /// output directory
        #[arg(long)]
        out: PathBuf,
        /// green-dominance margin for mask binarization
        #[arg(long, default_value_t = lumen::eval::DEFAULT_TAU)]
        tau: f64,
    },
    /// Decode k OC appearance variations of one input frame's geometry
    Sample {
        /// trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// input PNG frame
        #[arg(long)]
        input: PathBuf,
        /// domain of the input frame
        #[arg(long, value_enum, default_value_t = DomainArg::Vc)]
        domain: DomainArg,
        /// number of noise draws
        #[arg(short, default_value_t = 5)]
        k: usize,
        /// seed for the sampling noise stream
        #[arg(long, default_value_t = 7)]
        noise_seed: u64,
        /// output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted mask PNGs against ground-truth mask PNGs
    Eval {
        /// directory of predicted masks
        #[arg(long)]
        pred: PathBuf,
        /// directory of ground-truth masks
        #[arg(long)]
        gt: PathBuf,
        /// output directory for the report
        #[arg(long)]
        out: PathBuf,
    },
}

/// Provenance record written as `run.json` by every command. Contains no
/// timestamps so reruns of the same invocation are byte-identical.
#[derive(Serialize)]
struct RunRecord {
    command: &'static str,
    tool_version: &'static str,
    checkpoint_format: &'static str,
    config_hash: Option<String>,
    seed: Option<u64>,
}

fn write_run_record(
    out: &Path,
    command: &'static str,
    config_hash: Option<String>,
    seed: Option<u64>,
) -> lumen::error::Result<()> {
    let record = RunRecord {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: lumen::checkpoint::MAGIC,
        config_hash,
        seed,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    Ok(())
}

fn read_config_file(path: Option<&PathBuf>) -> lumen::error::Result<Option<String>> {
    match path {
        None => Ok(None),
        Some(p) => Ok(Some(std::fs::read_to_string(p).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", p.display()))
        })?)),
    }
}

fn run(cli: Cli) -> lumen::error::Result<()> {
    match cli.cmd {
        Cmd::GenData {
            config,
            overrides,
            out,
        } => {
            let text = read_config_file(config.as_ref())?;
            let cfg = load_config(
                DataConfig::default(),
                text.as_deref(),
                &overrides,
                DataConfig::set,
            )?;
            let summary = generate_dataset(&cfg, &out)?;
            write_run_record(&out, "gen-data", Some(cfg.hash()), Some(cfg.seed))?;
            println!(
                "wrote {} frames per domain ({} manifest rows) to {}",
                summary.frames_per_domain,
                summary.manifest_rows,
                out.display()
            );
        }
        Cmd::Train {
            config,
            overrides,
            data,
            out,
            resume,
        } => {
            let text = read_config_file(config.as_ref())?;
            let cfg = load_config(
                TrainConfig::default(),
                text.as_deref(),
                &overrides,
                TrainConfig::set,
            )?;
            let hash = cfg.hash();
            let seed = cfg.seed;
            let outcome = train(cfg, &data, &out, resume.as_deref())?;
            write_run_record(&out, "train", Some(hash), Some(seed))?;
            println!(
                "ran {} steps; loss CSV {}; final checkpoint {}",
                outcome.steps_run,
                outcome.csv_path.display(),
                outcome.final_checkpoint.display()
            );
        }
        Cmd::Infer {
            checkpoint,
            input,
            out,
            tau,
        } => {
            let summary = infer_dir(&checkpoint, &input, &out, tau)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            write_run_record(&out, "infer", Some(ckpt.config_hash), Some(ckpt.master_seed))?;
            println!(
                "translated {} frames ({} skipped) at {:.1} frames/s; temporal stability {}",
                summary.frames,
                summary.skipped,
                summary.frames_per_second,
                summary
                    .temporal_stability
                    .map_or("n/a".to_string(), |v| format!("{v:.4}")),
            );
        }
        Cmd::Sample {
            checkpoint,
            input,
            domain,
            k,
            noise_seed,
            out,
        } => {
            let domain = match domain {
                DomainArg::Vc => SampleDomain::Vc,
                DomainArg::Oc => SampleDomain::Oc,
            };
            let outcome = sample_variations(&checkpoint, &input, domain, k, noise_seed, &out)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            write_run_record(&out, "sample", Some(ckpt.config_hash), Some(noise_seed))?;
            println!(
                "wrote {} samples to {}; mean pairwise L1 {:.4}",
                outcome.paths.len(),
                out.display(),
                outcome.mean_pairwise_l1
            );
        }
        Cmd::Eval { pred, gt, out } => {
            let report = evaluate_mask_dirs(&pred, &gt)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), report.to_json())?;
            std::fs::write(out.join("per_frame.csv"), report.per_frame_csv())?;
            write_run_record(&out, "eval", None, None)?;
            println!(
                "{} frames: accuracy {:.4} (pixel-pooled {:.4}), dice {:.4}",
                report.frame_count, report.accuracy, report.accuracy_pixel_pooled, report.dice
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
