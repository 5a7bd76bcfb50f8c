//! Experiment configuration, distortion-perception sweeps, oracle checks and
//! reporting around the `maprps` core.

pub mod config;
pub mod report;
pub mod sweep;
pub mod verify;

pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use sweep::{run_sweep, SweepOptions, SweepResult};
pub use verify::{verify, Status, VerifyReport};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] maprps::Error),
    #[error("{failed} of {total} trials failed (first error: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Report(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}
