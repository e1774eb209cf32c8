//! Sparse matrix kernels and direct solvers.
//!
//! Compressed-row storage with triplet assembly, a sparse direct
//! [`Factorization`] (Cholesky for SPD matrices, LU otherwise), a
//! [`ConstrainedSolver`] for singular symmetric systems whose solutions must
//! stay orthogonal to a known nullspace, and a dense generalized eigensolver
//! used only as a desk-scale oracle.

mod csr;
mod eig;
mod factor;

pub use csr::CsrMatrix;
pub use eig::{dense_generalized_eig, orthonormal_complement, DenseMatrix};
pub use factor::{factorize, ConstrainedSolver, Factorization};

/// Euclidean inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x *= alpha`.
pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

/// Maximum absolute entry.
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

/// Tiny deterministic generator for probe vectors and power-iteration seeds.
/// Not a statistical RNG; it only needs to avoid special directions.
#[derive(Clone)]
pub(crate) struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493))
    }

    pub fn next_f64(&mut self) -> f64 {
        // Numerical Recipes 64-bit LCG; top bits are well mixed.
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn vector(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }
}
