use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trrisk::tr_engine::Inexactness;
use trrisk_cli::{parse_level, run_config, run_mesh_study, Overrides, EXIT_NOT_CONVERGED, EXIT_OK};

#[derive(Parser)]
#[command(name = "trrisk", version, about = "Inexact trust-region solver experiments")]
struct Cli {
    /// Seed for the random problem data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV and JSON artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Oracle tolerance strategy.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problem described by a TOML or JSON config.
    Solve { config: PathBuf },
    /// Solve an elliptic config on several meshes.
    MeshStudy {
        config: PathBuf,
        /// Meshes as NXxNY, comma separated.
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_level)]
        levels: Vec<(usize, usize)>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        mode: cli.mode.map(|m| match m {
            Mode::Exact => Inexactness::Exact,
            Mode::Adaptive => Inexactness::Adaptive,
        }),
    };
    let mut stdout = io::stdout().lock();
    let outcome = match &cli.command {
        Command::Solve { config } => run_config(config, &overrides, &mut stdout).map(|s| s.summary.converged),
        Command::MeshStudy { config, levels } => {
            run_mesh_study(config, &overrides, levels, &mut stdout).map(|rows| rows.iter().all(|r| r.summary.converged))
        }
    };
    let code = match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_NOT_CONVERGED,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
