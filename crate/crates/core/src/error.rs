use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("not a probability simplex: entries sum to {sum}")]
    NotSimplex { sum: f64 },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("target Bayes accuracy {target} unreachable for separation in [{lo}, {hi}] (accuracy spans {acc_lo:.4}..{acc_hi:.4})")]
    Unreachable {
        target: f64,
        lo: f64,
        hi: f64,
        acc_lo: f64,
        acc_hi: f64,
    },

    #[error("all reweighting weights are zero")]
    DegenerateWeights,

    #[error("trained bias-only model missed the analytic posterior: mean KL {kl:.5} > {bound}")]
    BiasFit { kl: f64, bound: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
