use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {0} is not a leaf that requires grad")]
    NotAParameter(usize),

    #[error("variable {0} does not participate in the loss graph")]
    NotInGraph(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("expert {0} has a zero-norm weight matrix")]
    ZeroNormWeights(usize),

    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),

    #[error("orthogonality constraint violated: {0}")]
    Constraint(String),

    #[error("index {index} out of range for {what} of length {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("single-class input: {0}")]
    SingleClass(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NotAParameter(_) => "not_a_parameter",
            Error::NotInGraph(_) => "not_in_graph",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyCodebook => "empty_codebook",
            Error::ZeroNormWeights(_) => "zero_norm_weights",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Constraint(_) => "constraint",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Config(_) => "config",
            Error::SingleClass(_) => "single_class",
            Error::Parse { .. } => "parse",
            Error::Artifact(_) => "artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
