use thiserror::Error;

/// Errors surfaced by simulators, learners, the oracle and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("truncated chain would have {states} states (limit {limit})")]
    ChainTooLarge { states: u128, limit: usize },
    #[error("chain has {} closed communicating classes, sizes {sizes:?}", sizes.len())]
    MultiClass { sizes: Vec<usize> },
    #[error("window grids do not align: {0}")]
    Alignment(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Config-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::UnknownPreset(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
