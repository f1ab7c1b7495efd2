use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no CIFAR-10 directory: pass --data or set {}", crate::config::DATA_ENV)]
    MissingData,
    /// A verification or golden comparison did not hold.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] rla_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 failed check, 2 usage or configuration error, 3 I/O or data error.
    pub fn exit_code(&self) -> u8 {
        use rla_core::Error as E;
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::MissingData => 3,
            CliError::Core(e) => match e {
                E::Io(_) | E::Dataset(_) | E::Checkpoint(_) => 3,
                E::Config(_)
                | E::InvalidSpec(_)
                | E::InvalidArgument { .. }
                | E::NotInvertible(_)
                | E::NoSharedConvs => 2,
                _ => 1,
            },
        }
    }
}
