use thiserror::Error;

/// Errors raised across the lab. Each variant maps to one failure class of
/// the public operations; the CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {component} loss at iteration {iter}")]
    Divergence { iter: usize, component: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl LabError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        LabError::Shape {
            context,
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
