use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("attention row {0} has every key blocked")]
    FullyMaskedRow(usize),
    #[error("non-finite log-likelihood at future step {step}")]
    NonFiniteLikelihood { step: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no training windows")]
    EmptyCorpus,
    #[error("singular matrix: {0}")]
    Singular(&'static str),
    #[error("(A, B) is not stabilizable")]
    NotStabilizable,
    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("predictions are stale: age {age:.4} s exceeds {limit:.4} s")]
    StalePredictions { age: f64, limit: f64 },
    #[error("non-finite state at tick {tick}")]
    NonFiniteState { tick: usize },
}
