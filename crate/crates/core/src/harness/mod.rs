//! Run orchestration: configuration, training, evaluation, benchmarking and
//! plotting.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod plot;
pub mod train;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{RouteConfig, RunConfig, RuntimeConfig};
pub use evaluate::{evaluate_checkpoint, evaluate_expert, evaluate_policy, Evaluation};
pub use metrics::{infraction_penalty, AggregateMetrics, EpisodeRecord, InfractionFactors, MeanStd};
pub use train::{train, train_seed, EvalPoint, Manifest, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
    #[error("threshold missed: {0}")]
    Threshold(String),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 runtime, 4 threshold miss.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Mismatch(_) => 2,
            Self::Runtime(_) => 3,
            Self::Threshold(_) => 4,
        }
    }
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
