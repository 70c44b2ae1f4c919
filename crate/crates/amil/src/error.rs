use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum AmilError {
    #[error("shape mismatch: {context} (left {left_rows}x{left_cols}, right {right_rows}x{right_cols})")]
    Shape {
        context: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: non-finite value at coordinate {index}: {context}")]
    Numeric { context: &'static str, index: usize },

    #[error("training diverged at iteration {iteration}: {what} = {value}")]
    Divergence {
        iteration: u64,
        what: &'static str,
        value: f64,
    },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AmilError>;

impl AmilError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AmilError::Io {
            path: path.into(),
            source,
        }
    }
}
