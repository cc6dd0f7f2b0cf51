use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory has no turns")]
    EmptyTrajectory,

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid preference pair: {0}")]
    InvalidPair(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("enumeration exceeded cap of {cap} trajectories")]
    EnumerationOverflow { cap: usize },

    #[error("non-finite loss {value} in {stage} at step {step}")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        value: f64,
    },

    #[error("no trajectory reaches reward threshold {threshold}")]
    NoQualifyingTrajectories { threshold: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("stage `{stage}` failed")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
