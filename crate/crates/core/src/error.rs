use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("sample count exceeds cloud size ({requested} > {available})")]
    SampleCountExceedsCloud { requested: usize, available: usize },
    #[error("k exceeds cloud size ({k} > {available})")]
    KExceedsCloud { k: usize, available: usize },
    #[error("coincident pair")]
    CoincidentPair,
    #[error("degenerate neighborhood")]
    DegenerateNeighborhood,
    #[error("normals required but the cloud has none")]
    MissingNormals,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mlp dimension mismatch: expected trailing width {expected}, got {got}")]
    MlpDimensionMismatch { expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("mask ratio leaves no visible tokens")]
    NoVisibleTokens,
    #[error("nothing to reconstruct")]
    NothingToReconstruct,
    #[error("degenerate mask ratio {ratio} for {groups} groups")]
    DegenerateMaskRatio { ratio: f64, groups: usize },
    #[error("empty point set")]
    EmptyPointSet,
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("label/class-count mismatch: {0}")]
    LabelMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("duplicate path `{0}` in manifest")]
    DuplicatePath(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
