use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] reweight_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}, record {record}: {reason}")]
    Manifest {
        path: PathBuf,
        record: usize,
        reason: String,
    },
    #[error(transparent)]
    Weights(#[from] WeightFileError),
    #[error("config: {0}")]
    Config(String),
    #[error("{0} exists; pass --force to overwrite")]
    WouldOverwrite(PathBuf),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures reading a weight file.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WeightFileError {
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("fingerprint {0:#018x} matches no known network layout")]
    UnknownFingerprint(u64),
    #[error("weight file describes layout {found:#018x}, expected {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("weight file truncated")]
    Truncated,
    #[error("weight file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
