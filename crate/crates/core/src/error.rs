use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry in column {column} (row {row})")]
    NonFinite { row: usize, column: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("requested {requested} modes but only {available} are available")]
    Truncation { requested: usize, available: usize },

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("unknown node set `{0}`")]
    UnknownNodeSet(String),

    #[error("element {element} has a non-positive Jacobian at Gauss point {gauss_point}")]
    InvertedElement { element: usize, gauss_point: usize },

    #[error("unknown element id {0}")]
    UnknownElement(usize),

    #[error("material: {0}")]
    Material(#[from] MaterialError),

    #[error("element {element}: {source}")]
    Element { element: usize, source: MaterialError },

    #[error("rank deficiency: requested {requested} ({field}) but attainable rank is {attainable}")]
    Rank { field: &'static str, requested: usize, attainable: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("solver: {0}")]
    Solver(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures of the Gauss-point constitutive update.
#[derive(Debug, Clone, Error)]
pub enum MaterialError {
    #[error("argument outside the model domain: {0}")]
    Domain(String),

    #[error("Gauss point {gauss_point}: local Newton did not converge (residual history {history:?})")]
    LocalNewton { gauss_point: usize, history: Vec<f64> },

    #[error("no admissible active set satisfies the loading/unloading conditions")]
    NoActiveSet,
}

impl MaterialError {
    pub(crate) fn at_gauss_point(self, gp: usize) -> Self {
        match self {
            MaterialError::LocalNewton { history, .. } => MaterialError::LocalNewton { gauss_point: gp, history },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
