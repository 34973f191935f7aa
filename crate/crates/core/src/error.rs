use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("manifest mismatch for {image_id}: field {field} has width {found}, manifest says {expected}")]
    ManifestMismatch {
        image_id: String,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid features for {image_id}: {reason}")]
    InvalidFeatures { image_id: String, reason: String },
    #[error("expected {expected} feature elements, got {found}")]
    FeatureArityMismatch { expected: usize, found: usize },
    #[error("token sequence of length {len} exceeds max_len {max_len}")]
    LengthExceeded { len: usize, max_len: usize },
    #[error("token sequence must be non-empty and end with EOS")]
    NotEosTerminated,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("batch of size {0} is too small; at least 2 samples are required")]
    BatchTooSmall(usize),
    #[error("beam of size {0} is too small; at least 2 candidates are required")]
    BeamTooSmall(usize),
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("{candidates} candidates but {references} reference sets")]
    MismatchedLengths { candidates: usize, references: usize },
    #[error("sample {0:?} has an empty reference set")]
    EmptyReferences(String),
    #[error("image {0:?} has no ground-truth attribute words")]
    MissingAttributes(String),
    #[error("generations missing for samples: {}", .0.join(", "))]
    CoverageGap(Vec<String>),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("sample {sample_id:?} references missing image {image_id:?}")]
    DanglingImageId { sample_id: String, image_id: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing prerequisite: stage {stage} needs a {needs} checkpoint ({searched})")]
    MissingPrerequisite {
        stage: String,
        needs: String,
        searched: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
