use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ediy::data::{generate_synthetic, load_dataset, read_image, write_pgm, write_synthetic_dataset};
use ediy::error::Result;
use ediy::eval::{diversity_report, linear_probe, match_inspect, saliency_map, ProbeConfig};
use ediy::train::{bootstrap_teacher, load_checkpoint, run_pretraining, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "ediy", version, about = "Region-aware self-supervised pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset (PPM + labels.tsv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Stage 1: train a teacher with the instance loss only.
    BootstrapTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: pre-train with the full composite objective.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint; overrides the config's `teacher` field.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint produced by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Region-collapse diagnostics; prints a JSON report.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Feature-norm saliency heatmap; writes an 8-bit PGM.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen backbone features; prints a JSON result.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Teacher region assignments for one image; prints a JSON report.
    MatchInspect {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, classes, size, seed } => {
            let images = generate_synthetic(seed, n, classes, size)?;
            write_synthetic_dataset(&out, &images)?;
            println!("wrote {} images to {}", images.len(), out.display());
        }
        Command::BootstrapTeacher { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = bootstrap_teacher(&cfg, &out)?;
            println!("teacher checkpoint at {}", dir.display());
        }
        Command::Pretrain { config, teacher, out, resume } => {
            let mut cfg = TrainConfig::load(&config)?;
            if cfg.stage != Stage::Ediy {
                return Err(ediy::Error::Config(
                    "pretrain requires a config with stage \"ediy\"".into(),
                ));
            }
            if let Some(t) = teacher {
                cfg.teacher = Some(t);
            }
            let dir = run_pretraining(&cfg, &out, resume.as_deref())?;
            println!("checkpoint at {}", dir.display());
        }
        Command::Diagnose { checkpoint, data, samples, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            let state = ck.model_state()?;
            let images = load_dataset(&data)?;
            let report = diversity_report(
                &state.online,
                &ck.config.model,
                ck.config.aug.output_size,
                &images,
                samples,
                seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Saliency { checkpoint, image, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let state = ck.model_state()?;
            let img = read_image(&image)?;
            let map = saliency_map(&state.online, &ck.config.model, ck.config.aug.output_size, &img)?;
            write_pgm(&out, &map.render)?;
            println!("wrote {}", out.display());
        }
        Command::Probe { checkpoint, data, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            let state = ck.model_state()?;
            let images = load_dataset(&data)?;
            let result = linear_probe(
                &state.online,
                &ck.config.model,
                ck.config.aug.output_size,
                &images,
                &ProbeConfig::default(),
                seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::MatchInspect { teacher, image, seed } => {
            let ck = load_checkpoint(&teacher)?;
            let teacher_params = ck.teacher_backbone()?;
            let img = read_image(&image)?;
            let report = match_inspect(
                &teacher_params,
                &ck.config.model,
                &ck.config.aug,
                &img,
                seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
