use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// Validation problems (bad inputs) map to [`Error::Domain`]; everything else
/// is a computation that could not be completed to the requested accuracy.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("ratio estimate did not settle: spread {spread:.3e} over window {window:?} exceeds {tol:.1e}")]
    Estimation {
        spread: f64,
        tol: f64,
        window: (usize, usize),
    },

    #[error("summation budget exhausted after {terms} terms (partial sum {partial:.6e}, last tail estimate {tail:.3e})")]
    Budget { terms: usize, partial: f64, tail: f64 },

    #[error("series behaviour is indeterminate after {terms} terms (partial sum {partial:.6e})")]
    Indeterminate { terms: usize, partial: f64 },

    #[error("requested mass {mass} exceeds the critical mass {critical}")]
    Supercritical { mass: f64, critical: f64 },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("malformed operator: {0}")]
    Construction(String),

    #[error("step size collapsed to {step:.3e} at t = {t}")]
    Stiffness { t: f64, step: f64 },

    #[error("component {index} became {value:.3e} at t = {t}")]
    Positivity { t: f64, index: usize, value: f64 },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("only {usable} usable rows in the fit window, need at least {needed}")]
    InsufficientData { usable: usize, needed: usize },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for input-validation failures as opposed to numerical ones.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Supercritical { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
