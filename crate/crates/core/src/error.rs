use thiserror::Error;

#[derive(Debug, Error)]
pub enum HvmpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance `{name}` is numerically singular (condition number {condition:.3e})")]
    Singular { name: String, condition: f64 },

    #[error(
        "requested {rows}x{cols} matrix exceeds the size guard of {limit}x{limit}; use the matrix-form path instead"
    )]
    Size { rows: usize, cols: usize, limit: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric divergence at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("{step} failed: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<HvmpError>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HvmpError {
    pub(crate) fn in_step(self, step: &'static str) -> Self {
        HvmpError::Step {
            step,
            source: Box::new(self),
        }
    }

    /// Walks through `Step` wrappers to the underlying error.
    pub fn root(&self) -> &HvmpError {
        match self {
            HvmpError::Step { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, HvmpError>;
