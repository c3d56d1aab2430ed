//! Experiment runner: declarative configs, dataset fetching, run records
//! and plot-data export on top of `kdlab-core`.

pub mod config;
pub mod experiments;
pub mod export;
pub mod fetch;
pub mod record;

use kdlab_core::analysis::AnalysisError;
use kdlab_core::data::DataError;
use kdlab_core::sweetspot::SweepError;
use kdlab_core::train::{CheckpointError, TrainError};
use thiserror::Error;

pub use config::ExperimentConfig;
pub use experiments::{run_experiment, RunOptions, RunOutcome};
pub use record::MetricsRecord;

/// Every failure the tool reports, grouped by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    /// 1 config, 2 data, 3 runtime or divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Prefixes the message with `context` and keeps the category.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{context}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{context}: {m}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Teacher(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Optim(_) | TrainError::TemperatureMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::ShapeMismatch { .. } | TrainError::EmptyDataset | TrainError::TransferMismatch(_) => {
                CliError::Data(e.to_string())
            }
            TrainError::Divergence { .. } | TrainError::Nn(_) | TrainError::Loss(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::ClassOutOfRange { .. } | AnalysisError::DuplicateClasses(_) => CliError::Config(e.to_string()),
            AnalysisError::EmptyDataset | AnalysisError::NotEnoughExamples { .. } | AnalysisError::TooFewClasses { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Grid(_) => CliError::Config(e.to_string()),
            SweepError::Train(t) => t.into(),
            SweepError::Analysis(a) => a.into(),
            SweepError::EmptySurface | SweepError::Infeasible { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_stable_exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(CliError::Data("x".into()).exit_code(), 2);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 3);
        let div: CliError = TrainError::Divergence { epoch: 0, step: 3 }.into();
        assert_eq!(div.exit_code(), 3);
        let missing: CliError = DataError::Empty.into();
        assert_eq!(missing.exit_code(), 2);
        assert_eq!(CliError::Data("m".into()).context("loading").to_string(), "data error: loading: m");
    }
}
