//! `muse` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Task;
use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "muse", version, about = "Multi-scale dense self-distillation for nucleus detection")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Caps the number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ROI corpus.
    Gen {
        /// Number of ROIs.
        #[arg(long)]
        n: usize,
        /// Output corpus directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Self-distillation pretraining on a corpus.
    Pretrain {
        /// Corpus directory written by `gen`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Detection fine-tuning from a pretrained checkpoint.
    Finetune {
        /// Pretrained checkpoint.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Corpus with annotated squares.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or, for `det`, a predictions file).
    Eval {
        /// Checkpoint, or a `.json`/`.jsonl` predictions file for `det`.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Evaluation corpus.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Evaluation protocol.
        #[arg(long, value_enum)]
        task: Task,
        /// Output directory, or a `.json` report path.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of every gradient.
    Gradcheck {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Dump a paired global view of one ROI with provenance.
    Views {
        /// ROI id or ordinal (`roi_00003`, `r3`, `3`).
        #[arg(long)]
        roi: String,
        /// Corpus to read the ROI from; without it the ROI is generated.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Views { .. } => "views",
        }
    }

    fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Gen { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Finetune { out, .. }
            | Command::Eval { out, .. }
            | Command::Gradcheck { out }
            | Command::Views { out, .. } => out.as_ref(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.gradcheck.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))?;
    }
    let out = cli
        .command
        .out()
        .cloned()
        .unwrap_or_else(|| cfg.out_dir.join(cli.command.name()));
    log::info!("{} -> {}", cli.command.name(), out.display());
    match &cli.command {
        Command::Gen { n, .. } => commands::gen(&cfg, *n, &out),
        Command::Pretrain { data, .. } => commands::pretrain_cmd(&cfg, data, &out),
        Command::Finetune { ckpt, data, .. } => commands::finetune_cmd(&cfg, ckpt, data, &out),
        Command::Eval { ckpt, data, task, .. } => commands::eval_cmd(&cfg, ckpt, data, *task, &out).map(|_| ()),
        Command::Gradcheck { .. } => commands::gradcheck_cmd(&cfg, &out),
        Command::Views { roi, data, .. } => commands::views_cmd(&cfg, roi, data.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUSE_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
