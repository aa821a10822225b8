use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("degenerate attribute: {0}")]
    DegenerateAttribute(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("missing image {0}")]
    MissingImage(PathBuf),

    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("corrupt switch record: {0}")]
    CorruptSwitches(String),

    #[error("class {0} has no examples")]
    EmptyClass(usize),

    #[error("empty prediction set")]
    EmptySet,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("need at least 2 raters, got {0}")]
    InsufficientRaters(usize),

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing artifact {path} (run `{producer}` first)")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "InvalidShape",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyDataset => "EmptyDataset",
            Error::DegenerateAttribute(_) => "DegenerateAttribute",
            Error::InvalidImage(_) => "InvalidImage",
            Error::InvalidSplit(_) => "InvalidSplit",
            Error::MissingImage(_) => "MissingImage",
            Error::ParseError { .. } => "ParseError",
            Error::CorruptSwitches(_) => "CorruptSwitches",
            Error::EmptyClass(_) => "EmptyClass",
            Error::EmptySet => "EmptySet",
            Error::UndefinedCorrelation(_) => "UndefinedCorrelation",
            Error::InsufficientRaters(_) => "InsufficientRaters",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MissingArtifact { .. } => "MissingArtifact",
            Error::BadCheckpoint(_) => "BadCheckpoint",
            Error::Io(_) => "IoError",
            Error::Image(_) => "IoError",
            Error::Csv(_) => "IoError",
        }
    }
}
