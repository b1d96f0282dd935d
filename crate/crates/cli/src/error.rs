use poseguard_classifier::ClassifierError;
use poseguard_core::autolabel::LabelError;
use poseguard_core::evaluation::EvalError;
use poseguard_core::keypoints::IngestError;
use poseguard_core::pose_render::RenderError;
use poseguard_core::transforms::TransformError;
use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration values.
    #[error("{0}")]
    Usage(String),
    /// Missing, malformed or inconsistent input data.
    #[error("{0}")]
    Data(String),
    /// Failures while computing or writing outputs.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn output(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> Self {
        match e {
            TransformError::ValueScale(_) => CliError::Usage(e.to_string()),
            TransformError::TooSmall(..) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoGroundTruth => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Config(_) => CliError::Usage(e.to_string()),
            ClassifierError::Input(_)
            | ClassifierError::Data(_)
            | ClassifierError::Checkpoint(_)
            | ClassifierError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}
