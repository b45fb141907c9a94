use auditlm::critique::CritiqueError;
use auditlm::store::StoreError;
use commentnepa::eval::report::EvalError;
use commentnepa::{InputError, PipelineError};

/// Exit code 2 for bad inputs, 1 for everything else.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    pub fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<InputError> for CliError {
    fn from(e: InputError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Input(e) => e.into(),
            PipelineError::EmptyCorpus | PipelineError::BadBatchSize | PipelineError::UnknownRun(_) => {
                CliError::Input(e.to_string())
            }
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownInvocation(_)
            | StoreError::UnknownSubroutine(_)
            | StoreError::UnknownBatch(_) => CliError::Input(e.to_string()),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<CritiqueError> for CliError {
    fn from(e: CritiqueError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}
