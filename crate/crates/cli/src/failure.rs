use std::fmt;
use std::io::ErrorKind;

use subalign_core::Error;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 2,
    Data = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub code: ExitCode,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: ExitCode::Usage,
            error: error.into(),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: ExitCode::Data,
            error: error.into(),
        }
    }

    pub fn context(mut self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(msg);
        self
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            // A path that does not exist is a bad flag, not bad data.
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => ExitCode::Usage,
            e if e.is_data_error() => ExitCode::Data,
            e if e.is_numerical_error() => ExitCode::Numerical,
            _ => ExitCode::Usage,
        };
        Self {
            code,
            error: err.into(),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait WithContext<T> {
    fn ctx(self, msg: impl fmt::Display + Send + Sync + 'static) -> CmdResult<T>;
}

impl<T> WithContext<T> for subalign_core::Result<T> {
    fn ctx(self, msg: impl fmt::Display + Send + Sync + 'static) -> CmdResult<T> {
        self.map_err(|e| Failure::from(e).context(msg))
    }
}
