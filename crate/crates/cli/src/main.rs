//! `airmeta`: run experiments, sweeps, the invariant suite and bound reports.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 runtime abort.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "airmeta", version, about = "Over-the-air personalized federated meta-learning simulator")]
struct Cli {
    /// Worker threads. The AIRMETA_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every trial of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Overrides `master_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run a one-axis sweep and write per-point results plus an aggregate table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sweep-out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Scale every folded memory by this factor (negative control).
        #[arg(long, hide = true)]
        inject_memory_fault: Option<f64>,
    },
    /// Evaluate convergence and generalization bounds for a finished run.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory written by `run`; its manifest must sit in the same directory.
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write `bounds.json`; defaults to the trajectory's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

/// Command failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Verify(String),
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verify(m) | Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let threads = match std::env::var("AIRMETA_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Usage(format!("AIRMETA_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("cannot start thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::Run {
            config,
            out_dir,
            seed,
            format,
        } => commands::run(&config, &out_dir, seed, format),
        Command::Sweep {
            config,
            out_dir,
            seed,
            format,
        } => commands::sweep(&config, &out_dir, seed, format),
        Command::Verify {
            seed,
            format,
            inject_memory_fault,
        } => commands::verify(seed, format, inject_memory_fault),
        Command::Bounds {
            config,
            trajectory,
            seed,
            out_dir,
            format,
        } => commands::bounds(&config, &trajectory, seed, out_dir.as_deref(), format),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
