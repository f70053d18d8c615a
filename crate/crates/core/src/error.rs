use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("degenerate pattern config: {0}")]
    DegeneratePattern(String),
    #[error("no valid homography after {0} resamples")]
    HomographySampling(usize),
    #[error("point maps to infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("texture source is empty")]
    EmptyTextures,
    #[error("malformed annotations:\n{}", .0.join("\n"))]
    Annotations(Vec<String>),
    #[error("split error: {0}")]
    Split(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss term `{0}` is not finite")]
    NonFiniteLoss(&'static str),
    #[error("invalid triplet batch: {0}")]
    TripletBatch(String),
    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss in stage {stage} at step {step}; batch written to {batch_file}")]
    Diverged {
        stage: String,
        step: usize,
        batch_file: PathBuf,
    },
    #[error("stage-2 training requires a stage-1 checkpoint")]
    MissingStageOneCheckpoint,
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
