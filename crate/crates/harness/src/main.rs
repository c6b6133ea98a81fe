//! `poselab` — command-line front end for the pose lab harness.
//!
//! Every subcommand reads one JSON experiment config (`--config`, or built-in
//! defaults when omitted) and works out of the config's `output_dir`.
//! Exit codes: 0 success, 1 config error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poselab_harness::ablate::{cmd_ablate, Knob};
use poselab_harness::config::ExperimentConfig;
use poselab_harness::pipeline;
use poselab_harness::report;
use poselab_harness::{HResult, HarnessError};

#[derive(Parser)]
#[command(
    name = "poselab",
    version,
    about = "Desk-scale pose-estimation lab: layer merging, token merging, \
             and a latent diffusion decoder on a toy transformer backbone"
)]
struct Cli {
    /// Path to the experiment config (JSON). Defaults to the built-in
    /// reference configuration when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clip dataset and its manifest
    GenData {
        /// Overwrite an existing dataset directory
        #[arg(long)]
        force: bool,
    },
    /// Train the motion VAE on the training split and save it
    TrainVae,
    /// Train the latent diffusion denoiser against the frozen VAE
    TrainDenoiser,
    /// Write the layer-similarity matrix (CSV + heatmap image)
    AnalyzeCka,
    /// Run the error-bounded layer-merge search and save the merged model
    Compress,
    /// Sweep one knob over its grid and write a CSV table
    Ablate {
        /// Knob to sweep: tau, latent_size, objective, n_l, mask_onoff
        #[arg(long, value_name = "KNOB")]
        knob: String,
    },
    /// Evaluate saved artifacts on the eval split and append to the ledger
    Eval,
    /// Measure single-thread inference throughput per stage
    Bench,
    /// Regenerate the scatter plot and summary from the run ledger
    Report,
    /// Run the full chain: data, baseline, similarity analysis, layer merge,
    /// VAE, denoiser, per-stage evaluation, ledger, and report
    Pipeline,
    /// Write the built-in default config as JSON (to a file, or stdout)
    InitConfig {
        /// Destination path; prints to stdout when omitted
        path: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> HResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: &Cli) -> HResult<()> {
    if let Command::InitConfig { path } = &cli.command {
        let cfg = ExperimentConfig::default();
        match path {
            Some(p) => cfg.save(p)?,
            None => println!(
                "{}",
                serde_json::to_string_pretty(&cfg)
                    .map_err(|e| HarnessError::Runtime(e.to_string()))?
            ),
        }
        return Ok(());
    }
    let config = load_config(cli.config.as_ref())?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| HarnessError::Runtime(format!("cannot create output dir: {e}")))?;
    match &cli.command {
        Command::GenData { force } => pipeline::cmd_gen_data(&config, *force),
        Command::TrainVae => pipeline::cmd_train_vae(&config),
        Command::TrainDenoiser => pipeline::cmd_train_denoiser(&config),
        Command::AnalyzeCka => pipeline::cmd_analyze_cka(&config),
        Command::Compress => pipeline::cmd_compress(&config).map(|_| ()),
        Command::Ablate { knob } => {
            let knob: Knob = knob.parse()?;
            cmd_ablate(&config, knob).map(|_| ())
        }
        Command::Eval => pipeline::cmd_eval(&config).map(|_| ()),
        Command::Bench => pipeline::cmd_bench(&config),
        Command::Report => report::cmd_report(&config),
        Command::Pipeline => pipeline::run_pipeline(&config).map(|_| ()),
        Command::InitConfig { .. } => unreachable!("handled before config load"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
