use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a structural precondition (mismatched spaces,
    /// marginals, dimensions, empty sets).
    #[error("structural error: {0}")]
    Structural(String),

    #[error("junction marginals differ: W2 gap {gap:.3e} exceeds {tolerance:.1e}")]
    Junction { gap: f64, tolerance: f64 },

    #[error("Picard iteration did not converge after {iterations} sweeps (last residual {last:.3e})")]
    PicardDiverged { iterations: usize, residuals: Vec<f64>, last: f64 },

    #[error("flow undefined at t={t} (covers [{start}, {end}])")]
    FlowUndefined { t: f64, start: f64, end: f64 },

    #[error("euler polygon stuck at step {step}, t={t}: best quotient {best_quotient:.6} < {required:.6}")]
    PolygonStuck {
        step: usize,
        t: f64,
        best_quotient: f64,
        required: f64,
    },

    #[error("scenario error at {pointer}: {message}")]
    Scenario { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn scenario(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scenario {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
