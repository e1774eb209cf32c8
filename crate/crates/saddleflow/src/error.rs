use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Mesh connectivity is not a conforming decomposition.
    #[error("mesh topology error: {0}")]
    Topology(String),

    /// Direct factorization failed outright.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// The matrix factored, but a probe solve shows it is singular to
    /// working precision.
    #[error("matrix is rank deficient to working precision (probe residual {residual:.3e})")]
    RankDeficient { residual: f64 },

    /// A MINRES preconditioner produced a negative inner product, so it is
    /// not positive semidefinite on the Krylov space.
    #[error("indefinite preconditioner: <z, v> = {0:.3e}")]
    IndefinitePreconditioner(f64),

    /// Operand dimensions do not match.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A problem size exceeds a hard limit (dense oracle paths).
    #[error("problem too large: {0}")]
    TooLarge(String),

    /// Invalid run configuration or command-line usage.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An iterative solve failed in a way that invalidates the run.
    #[error("solver failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
