//! `pdx`: a reproducible pipeline for diagnosis-by-reference experiments on
//! synthetic cohorts. Every stage writes its artifact together with a manifest
//! (effective config, seeds, input digests) so runs can be reproduced exactly.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 corrupt or
//! unreadable data/checkpoints, 4 training divergence.

use clap::{Parser, Subcommand};
use pdx_cli::commands::{self, DataKind};
use pdx_cli::error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pdx", version, about = "Diagnosis-by-reference pipeline over synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with stratified splits.
    GenData {
        /// Which family of dataset to generate.
        #[arg(long, value_enum)]
        kind: DataKind,
        /// Config file (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the in-context engine on synthetic classification tasks.
    PretrainEngine {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the multimodal encoder with masked reconstruction.
    PretrainMmtm {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prompt adapter against a frozen engine.
    TrainDpt {
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint (from pretrain-mmtm).
        #[arg(long)]
        mmtm: PathBuf,
        /// Engine checkpoint (from pretrain-engine).
        #[arg(long)]
        engine: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse one fixed support/query episode every epoch.
        #[arg(long)]
        fixed_episode: bool,
        /// Override the alignment loss weight.
        #[arg(long)]
        lambda_align: Option<f64>,
        /// Override the in-context loss weight.
        #[arg(long)]
        lambda_icl: Option<f64>,
    },
    /// Score raw and adapted predictions on the held-out test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding engine.ckpt, mmtm.ckpt, and adapter.ckpt.
        #[arg(long)]
        artifacts: PathBuf,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the labeled-context size and compare methods at each ratio.
    SweepContext {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        /// Context ratios in (0, 1], comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = pdx_core::eval::SWEEP_RATIOS)]
        ratios: Vec<f64>,
        /// Number of evaluation seeds to average over.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the component ablations and report per-variant metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare raw, finetuned, and adapted methods on a tabular benchmark.
    CompareTabular {
        /// Benchmark spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        engine: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), error::CliError> {
    match cli.command {
        Command::GenData { kind, config, out } => commands::gen_data(kind, config.as_deref(), &out),
        Command::PretrainEngine { config, out } => {
            commands::pretrain_engine_cmd(config.as_deref(), &out)
        }
        Command::PretrainMmtm { data, config, out } => {
            commands::pretrain_mmtm_cmd(&data, config.as_deref(), &out)
        }
        Command::TrainDpt {
            data,
            mmtm,
            engine,
            config,
            out,
            fixed_episode,
            lambda_align,
            lambda_icl,
        } => commands::train_dpt_cmd(
            &data,
            &mmtm,
            &engine,
            config.as_deref(),
            &out,
            fixed_episode,
            lambda_align,
            lambda_icl,
        ),
        Command::Evaluate { data, artifacts, out } => commands::evaluate_cmd(&data, &artifacts, &out),
        Command::SweepContext { data, artifacts, ratios, seeds, config, out } => {
            commands::sweep_context_cmd(&data, &artifacts, &ratios, seeds, config.as_deref(), &out)
        }
        Command::Ablate { data, artifacts, seeds, config, out } => {
            commands::ablate_cmd(&data, &artifacts, seeds, config.as_deref(), &out)
        }
        Command::CompareTabular { spec, engine, seeds, config, out } => {
            commands::compare_tabular_cmd(&spec, &engine, seeds, config.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
