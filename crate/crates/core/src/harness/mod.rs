//! Experiment runner and diagnostic tables.

pub mod config;
pub mod envs;
pub mod reports;
pub mod runner;

use thiserror::Error;

pub use config::{ExperimentConfig, Regime};
pub use runner::{run_experiment, run_to_dir, ArtifactRow, MetricsRow, RunDir, RunOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Policy(#[from] crate::envpolicy::PolicyError),
    #[error(transparent)]
    Grpo(#[from] crate::grpo::GrpoError),
    #[error(transparent)]
    Regime(#[from] crate::regimes::RegimeError),
    #[error(transparent)]
    Thl(#[from] crate::thl::ThlError),
    #[error(transparent)]
    Exchange(#[from] crate::exchange::ExchangeError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error("non-finite update at step {} for policy `{}` on prompt {}", .0.step, .0.policy_id, .0.prompt)]
    NonFinite(Box<runner::AbortDump>),
}
