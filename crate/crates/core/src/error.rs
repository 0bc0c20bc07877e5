//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("perturbation infeasible for fact {fact}: {reason}")]
    PerturbationInfeasible { fact: String, reason: String },

    #[error("arity error: {0}")]
    Arity(String),

    #[error("infeasible sample: {0}")]
    InfeasibleSample(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("context length exceeded: {0}")]
    ContextOverflow(String),

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: String },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("prompt infeasible for fact {fact}: {reason}")]
    PromptInfeasible { fact: String, reason: String },

    #[error("degenerate corruption: clean accuracy {clean} <= corrupted accuracy {corrupted}")]
    DegenerateCorruption { clean: f64, corrupted: f64 },

    #[error("degenerate task-vector direction: zero norm")]
    DegenerateDirection,

    #[error("checkpoint format mismatch: expected {expected}, found {found}")]
    FormatMismatch { expected: String, found: String },

    #[error("artifact integrity failure: {0}")]
    Integrity(String),

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Process exit code contract: 0 success, 2 configuration error,
    /// 3 numeric/training failure, 4 artifact-integrity failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_)
            | Error::Arity(_)
            | Error::EmptyInput(_)
            | Error::PerturbationInfeasible { .. }
            | Error::InfeasibleSample(_)
            | Error::PromptInfeasible { .. }
            | Error::DegenerateCorruption { .. } => 2,
            Error::NonFiniteLoss { .. }
            | Error::Diverged { .. }
            | Error::ContextOverflow(_)
            | Error::DegenerateDirection => 3,
            Error::FormatMismatch { .. }
            | Error::Integrity(_)
            | Error::StaleArtifact(_)
            | Error::Io(_)
            | Error::Serde(_) => 4,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
