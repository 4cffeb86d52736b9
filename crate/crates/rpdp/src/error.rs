use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit-code classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("curve fit failed: {0}")]
    Fit(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical integration did not converge: {0}")]
    NoConvergence(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 config error, 3 fit failure,
    /// 4 data error, 5 internal invariant breach.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Fit(_) => 3,
            Error::Data(_) | Error::Io(_) => 4,
            Error::NoConvergence(_) | Error::Invariant(_) => 5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Domain("x".into()).exit_code(), 2);
        assert_eq!(Error::Fit("x".into()).exit_code(), 3);
        assert_eq!(Error::Data("x".into()).exit_code(), 4);
        assert_eq!(Error::Invariant("x".into()).exit_code(), 5);
    }
}
