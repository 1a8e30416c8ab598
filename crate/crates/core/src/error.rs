use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not a tensor bundle: {0} has no manifest.json")]
    NotABundle(PathBuf),
    #[error("corrupt bundle entry `{0}`: {1}")]
    CorruptBundle(String, String),
    #[error("unsupported element type `{0}` (only little-endian f32 is supported)")]
    UnsupportedDtype(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("missing metadata key `{0}`")]
    MissingMetadata(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeError {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("requested rank {rank} exceeds min(samples, dim) = {max}")]
    RankError { rank: usize, max: usize },
    #[error("no direction fitted for component {0}")]
    MissingDirection(String),
    #[error("component kind mismatch: {0}")]
    KindError(String),
    #[error("component {0} has no samples")]
    MissingSamples(usize),
    #[error("zero-norm vector where a direction is required")]
    ZeroVector,
    #[error("invalid argument: {0}")]
    ArgError(String),
    #[error("invalid decomposition level transition: {0}")]
    LevelError(String),
    #[error("window layout error: {0}")]
    LayoutError(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(name: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeError {
            name: name.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
