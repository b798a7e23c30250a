use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data support {support} exceeds the radial grid end {r_max}")]
    SupportExceedsGrid { support: f64, r_max: f64 },

    #[error("r = {r} is neither a grid node nor outside the potential support")]
    OffGrid { r: f64 },

    #[error("resonance: |W(τ)| = {wronskian_abs:e} at τ = {tau_re}{tau_im:+}i")]
    Resonance {
        tau_re: f64,
        tau_im: f64,
        wronskian_abs: f64,
    },

    #[error("λ = {lambda} lies within {distance:e} of the threshold σ = {sigma}")]
    ThresholdProximity { lambda: f64, sigma: f64, distance: f64 },

    #[error("derivative of order {order} unstable under step halving (relative change {change:e})")]
    DerivativeInstability { order: usize, change: f64 },

    #[error("quadrature budget exceeded after {panels} panels (error estimate {estimate:e})")]
    BudgetExceeded { panels: usize, estimate: f64 },

    #[error("step size {step} too large for |τ| = {tau_abs}")]
    StepSize { step: f64, tau_abs: f64 },

    #[error("CFL violated: dt = {dt} exceeds {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("domain too short: R_max = {r_max} but {required} is needed to keep the boundary out of reach")]
    Contamination { r_max: f64, required: f64 },

    #[error("undersampled: sample spacing {dt} cannot resolve ω = {omega}")]
    Aliasing { dt: f64, omega: f64 },

    #[error("fit needs {needed} points in the window, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("non-positive value {value} at t = {t}")]
    NonPositive { t: f64, value: f64 },

    #[error("negative power of t requires t > 0, got t = {0}")]
    NonPositiveTime(f64),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
