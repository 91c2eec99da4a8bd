use thiserror::Error;

use crate::train::Params;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    /// Training produced a non-finite loss. Carries the parameters from the
    /// last step whose loss was finite.
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged {
        epoch: usize,
        last_finite: Box<Params>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptData(msg.into())
    }
}
