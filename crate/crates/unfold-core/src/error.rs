use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Numerical routines never panic on bad user data; they return one of these
/// variants with enough context to identify the offending object.
#[derive(Debug, Error)]
pub enum Error {
    /// A probability weight is negative, zero, or the weights do not sum to one.
    #[error("degenerate probability weights: {0}")]
    DegenerateWeights(String),

    /// A permutation table is not a bijection or two generators fail to commute.
    #[error("invalid shift action: {0}")]
    InvalidShift(String),

    /// Dimension or component mismatch between operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A continuum-point query landed outside the window of a lattice function.
    #[error("query outside window: {0}")]
    OutsideWindow(String),

    /// A sampled function value or assembled quantity is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An integrand violates its advertised coercivity or symmetry.
    #[error("coercivity failure: {0}")]
    Coercivity(String),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("{solver} stalled after {iterations} iterations (residual {residual:.3e}, tolerance {tolerance:.3e})")]
    SolverStall {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    /// A first-order optimality check failed after a solve.
    #[error("optimality residual {residual:.3e} exceeds tolerance {tolerance:.3e} in {context}")]
    Optimality {
        context: &'static str,
        residual: f64,
        tolerance: f64,
    },

    /// Invalid configuration of a graph, grid, or study.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Serialization or deserialization failure.
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
