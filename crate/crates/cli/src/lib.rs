//! The `bpo` command line: builds families, runs sweeps, pipelines and
//! benchmarks, serves mock providers and verifies endpoints.
//!
//! Data goes to files under `--output-dir`; progress and timings go to
//! stderr.

pub mod commands;

use std::path::{Path, PathBuf};

use bpo_core::BpoError;
use bpo_service::ServiceError;
use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] BpoError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            CliError::Core(e) | CliError::Service(ServiceError::Core(e)) => e,
            _ => return EXIT_USAGE,
        };
        match core {
            BpoError::Transport(_) | BpoError::Protocol(_) => EXIT_TRANSPORT,
            BpoError::NotFound(_)
            | BpoError::InitialPromptFlipped
            | BpoError::EndpointsAgree
            | BpoError::NoViableCandidate(_) => EXIT_PIPELINE,
            _ => EXIT_USAGE,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "bpo", version, about = "Boundary-aware verification prompts for text-to-image model APIs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a model family and write its registry.
    Family(FamilyArgs),
    /// Interpolation sweep between two prompts on each model.
    Sweep(SweepArgs),
    /// Run the three stages on one model and benign prompt.
    Pipeline(PipelineArgs),
    /// Verification benchmark with every model as target.
    Bench(BenchArgs),
    /// Compare the three stage artifacts as verification prompts.
    Ablate(AblateArgs),
    /// Build a verification package for one target model.
    #[command(alias = "package")]
    Owner(OwnerArgs),
    /// Serve mock providers over HTTP.
    Serve(ServeArgs),
    /// Check an endpoint against a verification package.
    Verify(VerifyArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Family(a) => cmd_family(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Pipeline(a) => cmd_pipeline(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Owner(a) => cmd_owner(&a).map(|_| ()),
        Command::Serve(a) => cmd_serve(&a),
        Command::Verify(a) => cmd_verify(&a).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(BpoError::Transport("refused".into())).exit_code(), EXIT_TRANSPORT);
        assert_eq!(CliError::from(BpoError::Protocol("short".into())).exit_code(), EXIT_TRANSPORT);
        assert_eq!(CliError::from(BpoError::NotFound(100)).exit_code(), EXIT_PIPELINE);
        assert_eq!(CliError::from(BpoError::EndpointsAgree).exit_code(), EXIT_PIPELINE);
        assert_eq!(CliError::from(ServiceError::Core(BpoError::InitialPromptFlipped)).exit_code(), EXIT_PIPELINE);
        assert_eq!(CliError::from(BpoError::UnknownModel("m".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
    }
}
