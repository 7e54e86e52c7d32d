//! Config-driven experiment runner for the `trrisk` solver.
//!
//! Exit codes of the `trrisk` binary:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | converged |
//! | 1 | I/O failure while writing artifacts |
//! | 2 | bad command line or configuration |
//! | 3 | no convergence within `max_iter` (artifacts are still written) |
//! | 4 | oracle or solver fault |

pub mod config;
pub mod report;
pub mod runner;

use thiserror::Error;
use trrisk::tr_engine::TrError;

pub use config::{ConfigError, Overrides, ProblemConfig, RunConfig};
pub use runner::{mesh_study, parse_level, run_config, run_mesh_study, solve, MeshRow, Solved, Summary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] TrError),
    #[error("writing artifacts: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solver(TrError::Config(_) | TrError::Infeasible) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_ORACLE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}
