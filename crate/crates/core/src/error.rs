use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class `{class}` has no images")]
    EmptyClass { class: String },

    #[error("class `{class}` has {count} samples; at least {min} are required for a split")]
    ClassTooSmall {
        class: String,
        count: usize,
        min: usize,
    },

    #[error("split ratios must each lie in (0, 1) and sum to 1, got {train} + {validation} + {test}")]
    InvalidRatios {
        train: f64,
        validation: f64,
        test: f64,
    },

    #[error("image has zero width or height")]
    EmptyImage,

    #[error("sample `{sample}`: {reason}")]
    Sample { sample: String, reason: String },

    #[error("backbone graph outputs {graph} features but its sidecar declares {declared}")]
    FeatureDimMismatch { graph: usize, declared: usize },

    #[error("backbone `{name}` must have feature_dim {expected}, sidecar says {declared}")]
    KnownBackboneDim {
        name: String,
        expected: usize,
        declared: usize,
    },

    #[error("backbone mismatch: head was trained on `{head}` (D = {head_dim}) but backbone is `{backbone}` (D = {backbone_dim})")]
    BackboneMismatch {
        head: String,
        head_dim: usize,
        backbone: String,
        backbone_dim: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },

    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("`{0}` is empty")]
    Empty(&'static str),

    #[error("cannot draw {requested} distinct configurations from a space of {available}")]
    SearchSpaceTooSmall { requested: usize, available: usize },

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed (artifact {}): {source}", artifact.display())]
    Stage {
        stage: &'static str,
        artifact: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed feature file: {0}")]
    FeatureFormat(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("onnx runtime: {0}")]
    Onnx(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from bad user input rather than a failing stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::InvalidRatios { .. }
            | Error::SearchSpaceTooSmall { .. } => true,
            Error::Stage { source, .. } | Error::Trial { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
