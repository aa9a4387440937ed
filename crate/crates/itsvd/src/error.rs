//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data is unusable (non-finite values, missing snapshots, ...).
    #[error("bad data: {0}")]
    Data(String),

    /// An API was driven through an illegal sequence of calls.
    #[error("logic error: {0}")]
    Logic(String),

    /// A numerical routine could not produce a meaningful result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The first snapshot had zero norm; a rank-1 start is impossible.
    #[error("degenerate start: first snapshot has zero norm")]
    DegenerateStart,

    /// Partitions diverged in their collective call sequence.
    #[error("collective contract violated by partition {partition} at epoch {epoch}: {detail}")]
    CollectiveContract {
        partition: usize,
        epoch: u64,
        detail: String,
    },

    /// The exact energy accumulator is inconsistent with the singular values.
    #[error("energy accounting error: {0}")]
    EnergyAccounting(String),

    /// A configuration cannot be satisfied (e.g. memory budget below one column).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error("partition count mismatch: state was written with {stored}, running with {actual}")]
    PartitionMismatch { stored: usize, actual: usize },

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front-end:
    /// 2 usage, 3 data/format, 4 numeric/contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Logic(_) | Error::Config(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::ChecksumMismatch(_)
            | Error::PartitionMismatch { .. }
            | Error::VersionMismatch(_)
            | Error::Format { .. } => 3,
            Error::Numeric(_)
            | Error::DegenerateStart
            | Error::CollectiveContract { .. }
            | Error::EnergyAccounting(_) => 4,
        }
    }
}
