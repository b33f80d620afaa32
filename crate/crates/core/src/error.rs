use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset or config file could not be parsed. `line` is 1-based.
    #[error("{}", format_parse(.path, *.line, .sample_id, .message))]
    Parse {
        path: PathBuf,
        line: usize,
        sample_id: Option<String>,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shift {shift} outside the supported range [-{max}, {max}]")]
    ShiftOutOfRange { shift: i32, max: u32 },

    #[error("day {day} with offset {offset} is not encodable (shift exceeds the declared maximum)")]
    Encoding { day: i64, offset: u32 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("sample {0} has no label")]
    Unlabeled(String),

    #[error("backward called without cached activations")]
    MissingCache,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn format_parse(path: &std::path::Path, line: usize, id: &Option<String>, msg: &str) -> String {
    match id {
        Some(id) => format!("{}:{line}: sample {id}: {msg}", path.display()),
        None => format!("{}:{line}: {msg}", path.display()),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
