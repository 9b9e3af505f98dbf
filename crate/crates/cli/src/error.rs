use std::path::PathBuf;

use thiserror::Error;
use vimi_core::conditioning::EncodeError;
use vimi_core::diffusion::DiffusionError;
use vimi_core::metrics::MetricsError;
use vimi_core::prompt::PromptError;
use vimi_core::retrieval::RetrievalError;
use vimi_core::sampler::SampleError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("missing index {0}: run build-index first")]
    MissingIndex(PathBuf),
    #[error("missing checkpoint {0}: stage 2 fine-tunes a stage-1 checkpoint, run `train --stage 1` first")]
    MissingCheckpoint(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 1 for bad input, 2 for I/O failures, 3 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::MissingIndex(_) | CliError::MissingCheckpoint(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError::Input(message.into())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Io(source) => CliError::io("index i/o", source),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Io(source) => CliError::io("video or checkpoint i/o", source),
            e @ (DiffusionError::Corrupt(_)
            | DiffusionError::ShapeMismatch { .. }
            | DiffusionError::InvalidShape(_)
            | DiffusionError::InvalidConfig(_)
            | DiffusionError::EmptyDataset) => CliError::Input(e.to_string()),
            e @ (DiffusionError::NonFinite | DiffusionError::DivergedLoss { .. }) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Diffusion(d) => d.into(),
            e @ (SampleError::InvalidN(_) | SampleError::ShapeMismatch { .. } | SampleError::InvalidGuidance(_)) => {
                CliError::Input(e.to_string())
            }
            e @ SampleError::NonFiniteState { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EncodeError> for CliError {
    fn from(e: EncodeError) -> Self {
        match e {
            EncodeError::NonFinite => CliError::Internal(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NumericalFailure(_) => CliError::Internal(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}
