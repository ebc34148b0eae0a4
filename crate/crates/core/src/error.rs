use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("non-finite loss at epoch {epoch} batch {batch} (fingerprint {fingerprint:016x})")]
    NonFiniteLoss { epoch: usize, batch: usize, fingerprint: u64 },
    #[error("subset enumeration over {vars} context variables exceeds the limit of {limit}")]
    EnumerationBound { vars: usize, limit: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
