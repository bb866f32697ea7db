use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    #[error("singular kernel evaluation: {0}")]
    Singularity(String),

    #[error("charge collapse at t = {time}: charges {first} and {second} at distance {distance:e}")]
    Collapse {
        time: f64,
        first: usize,
        second: usize,
        distance: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling exhausted: {accepted} of {requested} samples accepted after {attempts} attempts")]
    SamplingExhausted {
        requested: usize,
        accepted: usize,
        attempts: u64,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("runs cannot be paired: {0}")]
    Pairing(String),
}

pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(name))
    }
}
