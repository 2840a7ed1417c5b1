use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] phrc_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("invalid JSON in {what}: {source}")]
    Json { what: String, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
    #[error("bridge: {0}")]
    Bridge(String),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub fn json(what: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            what: what.into(),
            source,
        }
    }

    /// Bad input from the operator (arguments, files, configuration) as
    /// opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Core(e) => matches!(
                e,
                phrc_core::Error::Config(_)
                    | phrc_core::Error::Validation(_)
                    | phrc_core::Error::Shape { .. }
                    | phrc_core::Error::EmptyCorpus
                    | phrc_core::Error::NotStabilizable
            ),
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Format { .. } | Error::Json { .. } | Error::Usage(_) => true,
            Error::Bridge(_) | Error::Runtime(_) => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else {
            1
        }
    }
}
