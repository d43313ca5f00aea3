//! `condflow`: dataset generation, two-phase training, evaluation,
//! single-image prediction, and checkpoint inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use condflow::config::RunConfig;

#[derive(Parser)]
#[command(name = "condflow", version, about = "Depth estimation with conditional gradient flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the corpus directory layout
    GenData {
        /// Run configuration file
        #[arg(long)]
        config: PathBuf,
        /// Overwrite a non-empty target directory
        #[arg(long)]
        force: bool,
    },
    /// Train phase 1 (alternating classification) or phase 2 (regression)
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's train.phase
        #[arg(long)]
        phase: Option<u32>,
        /// Phase-1 checkpoint that seeds phase-2 training
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Same-phase checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Upper bound on worker threads
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Disable smoothing preprocessing for this run
        #[arg(long)]
        no_l0: bool,
        /// Disable dataset augmentation for this run
        #[arg(long)]
        no_augment: bool,
    },
    /// Score a checkpoint's predictions over a depth dataset
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate (not needed with --oracle)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Ground-truth distance cap in meters: 50 or 80
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
        /// Score ground truth against itself to validate the pipeline
        #[arg(long)]
        oracle: bool,
        /// Upper bound on worker threads
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Disable smoothing preprocessing for this run
        #[arg(long)]
        no_l0: bool,
    },
    /// Predict depth for one image: metric PFM plus colormapped PPM
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (binary PPM) matching the network geometry
        #[arg(long)]
        image: PathBuf,
        /// Disable smoothing preprocessing for this run
        #[arg(long)]
        no_l0: bool,
    },
    /// Print a checkpoint's phase, iteration, and parameter/block census
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn load_config(path: &PathBuf, no_l0: bool, no_augment: bool) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if no_l0 {
        cfg.l0_smooth = false;
    }
    if no_augment {
        cfg.augment = false;
    }
    Ok(cfg)
}

fn check_threads(threads: usize) -> Result<(), CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, force } => {
            let cfg = load_config(&config, false, false)?;
            commands::cmd_gen_data(&cfg, force)
        }
        Command::Train {
            config,
            phase,
            init_from,
            resume,
            threads,
            no_l0,
            no_augment,
        } => {
            check_threads(threads)?;
            let mut cfg = load_config(&config, no_l0, no_augment)?;
            if let Some(p) = phase {
                if p != 1 && p != 2 {
                    return Err(CliError::Usage(format!("--phase {p} is not 1 or 2")));
                }
                cfg.train.phase = p;
            }
            commands::cmd_train(&cfg, init_from.as_deref(), resume.as_deref())
        }
        Command::Eval {
            config,
            ckpt,
            cap,
            oracle,
            threads,
            no_l0,
        } => {
            check_threads(threads)?;
            let cfg = load_config(&config, no_l0, false)?;
            commands::cmd_eval(&cfg, ckpt.as_deref(), cap, oracle, threads)
        }
        Command::Predict {
            config,
            ckpt,
            image,
            no_l0,
        } => {
            let cfg = load_config(&config, no_l0, false)?;
            commands::cmd_predict(&cfg, &ckpt, &image)
        }
        Command::Inspect { ckpt } => commands::cmd_inspect(&ckpt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
