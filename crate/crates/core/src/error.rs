use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("window underflow: need at least {needed} samples, got {got}")]
    WindowUnderflow { needed: usize, got: usize },
    #[error("fit error: {0}")]
    Fit(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("isolation unavailable: no modes above the eigenvalue floor")]
    IsolationUnavailable,
    #[error("overcharge abort at t = {t} s (soc = {soc})")]
    Overcharge { t: f64, soc: f64 },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
