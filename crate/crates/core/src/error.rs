use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside [0, 1]")]
    Domain { t: f64 },

    #[error("singular coefficient at t = {t}: {reason}")]
    Singularity { t: f64, reason: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: expected length {expected}, got {got}")))
    }
}
