use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use modalsurv_cli::commands;
use modalsurv_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "modalsurv",
    version,
    about = "Multi-modal self-supervised pretraining and survival evaluation"
)]
struct Cli {
    /// TOML run configuration; omitted fields fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for fold parallelism (0 = library default).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known latent risk.
    Synth,
    /// Run stage-1 self-supervised pretraining and save a checkpoint.
    Pretrain {
        /// Continue a previous run from its checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the Cox head on the full cohort and save the survival model.
    Train {
        /// Pretraining checkpoint (default: <out_dir>/checkpoint.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validated evaluation with KM curves and a log-rank test.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replace model scores with stored ground-truth latents.
        #[arg(long)]
        oracle_latents: Option<PathBuf>,
    },
    /// Emit the modality-subset and RNA-replacement ablation tables.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MODALSURV_LOG", "warn"))
        .init();
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()?;
    }

    let default_ckpt = || cfg.out_dir.join("checkpoint.ckpt");
    match &cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Pretrain { resume } => commands::cmd_pretrain(&cfg, resume.as_deref()),
        Command::Train { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(default_ckpt);
            commands::cmd_train(&cfg, &ckpt)
        }
        Command::Evaluate {
            checkpoint,
            oracle_latents,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(default_ckpt);
            commands::cmd_evaluate(&cfg, &ckpt, oracle_latents.as_deref())
        }
        Command::Ablate { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(default_ckpt);
            commands::cmd_ablate(&cfg, &ckpt)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
