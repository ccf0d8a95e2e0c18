use std::io;
use std::path::{Path, PathBuf};

use livematch_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, msg: impl ToString) -> Error {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Data(_) => 2,
            Error::Core(e) => match e {
                CoreError::Parameter(_) => 1,
                CoreError::InvalidRecord(_)
                | CoreError::EmptyCorpus
                | CoreError::Construction(_)
                | CoreError::Sampling(_)
                | CoreError::Slice(_)
                | CoreError::Dimension { .. } => 2,
                _ => 3,
            },
        }
    }
}
