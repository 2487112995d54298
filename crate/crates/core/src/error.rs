use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("no order pairs can be sampled from a sequence of length {len}")]
    NoPairs { len: usize },

    #[error("no temporal windows fit: {0}")]
    NoWindows(String),

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("incomplete evaluation table: missing {0}")]
    IncompleteTable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset file error: {0}")]
    Dataset(String),

    #[error("{component}: {source}")]
    Component {
        component: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            Error::Component { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn in_component(self, component: &'static str) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn in_component(self, component: &'static str) -> Result<T> {
        self.map_err(|e| Error::Component {
            component,
            source: Box::new(e),
        })
    }
}
