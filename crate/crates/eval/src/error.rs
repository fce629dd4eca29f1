use std::path::PathBuf;

use crate::config::ConfigIssue;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported manifest format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{0}")]
    Format(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Core(#[from] attrib_core::Error),
    #[error("invalid configuration ({} issue(s))", .0.len())]
    Config(Vec<ConfigIssue>),
    #[error("{failed} of {total} images failed, over the 10% budget")]
    OverBudget { failed: usize, total: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for bad requests, 1 for everything that went
    /// wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Core(
                attrib_core::Error::TargetOutOfRange { .. }
                | attrib_core::Error::TooManyPlayers { .. }
                | attrib_core::Error::UnknownModel(_)
                | attrib_core::Error::InvalidArgument(_)
                | attrib_core::Error::DomainMismatch(_)
                | attrib_core::Error::SignRequired
                | attrib_core::Error::NotCamEligible
                | attrib_core::Error::NoConvLayer,
            ) => 2,
            _ => 1,
        }
    }
}
