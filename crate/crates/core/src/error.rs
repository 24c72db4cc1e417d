use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infinite signal-to-noise ratio at t = 0")]
    InfiniteSnr,

    #[error("degenerate component: {0}")]
    Degenerate(String),

    #[error("non-finite value at t = {t}, sample {sample}, draw {draw}: {what}")]
    NonFinite {
        t: f64,
        sample: usize,
        draw: usize,
        what: String,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss:e}")]
    Divergence { epoch: usize, loss: f64, trace: Vec<f64> },

    #[error("sampler produced a non-finite state at step {step}")]
    SamplerNonFinite { step: usize },

    #[error("unknown figure '{name}'; available: {available}")]
    UnknownFigure { name: String, available: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}
