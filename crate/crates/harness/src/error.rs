use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] deepkd_core::Error),

    /// A run that was configured correctly but failed while executing.
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 2 for configuration and input validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use deepkd_core::Error as E;
        match self {
            Error::Core(E::InvalidArgument(_) | E::Parse { .. } | E::Validation(_)) => 2,
            _ => 1,
        }
    }
}
