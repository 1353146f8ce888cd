//! `itx`: phantom generation, SNR-ladder corruption, desk-scale training,
//! denoising, metric sweeps and attention timing.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{MissingInput, TRAIN_DIR};
use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "itx", version, about = "Imaging transformer denoising at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the ground-truth phantom and its region masks.
    Phantom(Common),
    /// Corrupt the ground truth at every SNR ladder level.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Comma-separated target SNRs replacing the configured ladder.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Train the backbone on generated noisy/clean pairs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Peak learning rate replacing the configured one.
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a `last.itxp` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise one series given as real and imaginary `.itx` files.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// g-factor map; generated from the config when absent.
        #[arg(long)]
        gfactor: Option<PathBuf>,
        real: PathBuf,
        imag: PathBuf,
    },
    /// Score a checkpoint on the stored ladder.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Defaults to the best checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time local, global and frame attention against dense attention.
    Bench(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom(c) | Command::Bench(c) => c,
            Command::Corrupt { common, .. }
            | Command::Train { common, .. }
            | Command::Denoise { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

fn setup_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("ITX_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| ConfigError(format!("ITX_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    setup_threads()?;
    let common = cli.command.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let root = common.out.clone().unwrap_or_else(|| cfg.out.clone());
    let quiet = common.quiet;
    match &cli.command {
        Command::Phantom(_) => {
            commands::phantom(&cfg, &root)?;
            println!("wrote {}", root.join(commands::PHANTOM_DIR).display());
        }
        Command::Corrupt { levels, .. } => {
            for r in commands::corrupt(&cfg, &root, levels.as_deref())? {
                println!("level{} target {} nn {:.6} measured {:.6}", r.index, r.target, r.nn, r.measured);
            }
        }
        Command::Train { lr, resume, .. } => {
            if let Some(lr) = lr {
                cfg.train.lr = *lr;
                cfg.validate()?;
            }
            let s = commands::train_cmd(&cfg, &root, resume.as_deref(), quiet)?;
            println!("steps {} best epoch {} val loss {:.6}", s.steps, s.best_epoch, s.best_val);
        }
        Command::Denoise { checkpoint, gfactor, real, imag, .. } => {
            let dir = commands::denoise(&cfg, &root, checkpoint, real, imag, gfactor.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::Sweep { checkpoint, .. } => {
            let ck = checkpoint.clone().unwrap_or_else(|| root.join(TRAIN_DIR).join("model.itxp"));
            println!("{}", itx_core::metrics::METRICS_HEADER);
            for r in commands::sweep_cmd(&root, &ck)? {
                println!(
                    "{},{},{:.3},{:.4},{:.3},{:.3},{:.3},{:.3},{:.4}",
                    r.case, r.target_snr, r.psnr_db, r.ssim, r.cnr_in, r.cnr_out, r.cnr_gt, r.psnr_in_db, r.ssim_in
                );
            }
        }
        Command::Bench(_) => {
            let (dec, dense) = commands::bench(&cfg, &root, quiet)?;
            println!("decomposed exponent {dec:.3}");
            println!("dense exponent {dense:.3}");
        }
    }
    Ok(())
}

/// Short tag for the first recognizable error in the chain.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<itx_core::Error>() {
            return core.kind();
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<MissingInput>() {
            return "missing_input";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("itx: error: {}: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
