use thiserror::Error;

use crate::lzmodel::FitReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no matching field between {lo_mt} and {hi_mt} mT at theta = {theta_deg} deg")]
    NoMatchingField {
        theta_deg: f64,
        lo_mt: f64,
        hi_mt: f64,
    },

    #[error("step controller underflow: dt = {dt_ms:e} ms at t = {t_ms} ms")]
    Stiffness { dt_ms: f64, t_ms: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit did not converge after {starts} starts (best rms {:.4e})", best.rms)]
    FitFailed { starts: usize, best: Box<FitReport> },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
