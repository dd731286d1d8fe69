use thiserror::Error;

/// Errors raised by constructions and verifiers in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no exact induced norm for p = {0}; use op_norm_bound")]
    UnsupportedNorm(String),

    #[error("shift series needs a right block-support certificate: {0}")]
    MissingSeriesCertificate(String),

    #[error("precondition failed in {stage}: {message}")]
    Precondition { stage: String, message: String },

    #[error("model too small in {stage}: need at least {required_blocks} blocks ({message})")]
    Margin {
        stage: String,
        required_blocks: usize,
        message: String,
    },

    #[error("{stage} did not converge: achieved bound {achieved:e}")]
    NotConverged { stage: String, achieved: f64 },

    #[error("singular system in {stage}: {message}")]
    Singular { stage: String, message: String },

    #[error("identity `{identity}` violated on probe {probe}: deviation {deviation:e}")]
    Relation {
        identity: String,
        probe: usize,
        deviation: f64,
    },
}

impl Error {
    pub(crate) fn precondition(stage: &str, message: impl Into<String>) -> Self {
        Error::Precondition {
            stage: stage.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn with_stage(self, stage: &str) -> Self {
        match self {
            Error::Precondition { stage: inner, message } => Error::Precondition {
                stage: format!("{stage}/{inner}"),
                message,
            },
            Error::Margin {
                stage: inner,
                required_blocks,
                message,
            } => Error::Margin {
                stage: format!("{stage}/{inner}"),
                required_blocks,
                message,
            },
            Error::NotConverged { stage: inner, achieved } => Error::NotConverged {
                stage: format!("{stage}/{inner}"),
                achieved,
            },
            Error::Singular { stage: inner, message } => Error::Singular {
                stage: format!("{stage}/{inner}"),
                message,
            },
            Error::MissingSeriesCertificate(m) => Error::Precondition {
                stage: stage.to_string(),
                message: format!("missing series certificate: {m}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
