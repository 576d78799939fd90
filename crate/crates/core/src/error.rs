use std::path::PathBuf;

/// Failures while parsing the on-disk volume and checkpoint formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected `{expected}`, found `{found}`")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown format version {found} (supported: {supported})")]
    UnknownVersion { found: u32, supported: u32 },
    #[error(
        "payload length mismatch: expected {expected_values} values ({expected_bytes} bytes), found {found_bytes} bytes"
    )]
    PayloadLength {
        expected_values: usize,
        expected_bytes: usize,
        found_bytes: usize,
    },
    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numerical failure: {op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transfer error: {0}")]
    Transfer(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 1 usage/config,
    /// 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Data(_) | Error::Format(_) | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
