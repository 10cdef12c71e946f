use crate::rerandomize::NearMiss;

/// Broad failure classes, used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Exhausted,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{what} is numerically singular (condition number {condition:.3e})")]
    Singular { what: String, condition: f64 },
    #[error("{what} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { what: String, min_eigenvalue: f64 },
    #[error(
        "no acceptable assignment within {draws} draws; closest draw had statistic/threshold ratio {:.4}",
        best.ratio
    )]
    MaxDrawsExceeded { draws: u64, best: Box<NearMiss> },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Invalid(_) => ErrorKind::Validation,
            Error::Singular { .. } | Error::NotPsd { .. } => ErrorKind::Numerical,
            Error::MaxDrawsExceeded { .. } => ErrorKind::Exhausted,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
