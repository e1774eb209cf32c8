use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use super::{dot, norm2, CsrMatrix, Lcg};
use crate::{Error, Result};

/// Ensure faer runs sequentially so repeated runs produce identical bits.
fn sequential_backend() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

enum Inner {
    Llt(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

/// Opaque direct factorization supporting repeated solves.
pub struct Factorization {
    inner: Inner,
    n: usize,
}

fn to_faer(a: &CsrMatrix) -> Result<SparseColMat<usize, f64>> {
    let triplets: Vec<Triplet<usize, usize, f64>> =
        a.iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
    SparseColMat::try_new_from_triplets(a.nrows(), a.ncols(), &triplets)
        .map_err(|e| Error::Factorization(format!("sparse conversion: {e:?}")))
}

/// Factor a square, structurally nonsingular matrix. `spd` selects a
/// Cholesky factorization; otherwise a sparse LU with pivoting is used.
///
/// A deterministic probe solve rejects matrices that are singular to working
/// precision, so callers with genuinely singular operators (for example the
/// frame pressure mass matrix) must pre-augment via [`ConstrainedSolver`].
pub fn factorize(a: &CsrMatrix, spd: bool) -> Result<Factorization> {
    sequential_backend();
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "cannot factor a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let sp = to_faer(a)?;
    // The backend panics on structurally singular input instead of returning
    // an error; translate that into the factorization error contract.
    let inner = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        if spd {
            sp.sp_cholesky(faer::Side::Lower)
                .map(Inner::Llt)
                .map_err(|e| Error::Factorization(format!("cholesky: {e:?}")))
        } else {
            sp.sp_lu()
                .map(Inner::Lu)
                .map_err(|e| Error::Factorization(format!("lu: {e:?}")))
        }
    }))
    .map_err(|_| Error::Factorization("factorization backend panicked (singular matrix?)".into()))??;
    let fact = Factorization { inner, n };

    // Probe: catches factorizations that "succeed" with tiny or zero pivots.
    let probe = Lcg::new(0x5eed + n as u64).vector(n);
    let x = fact.solve(&probe);
    let mut residual = a.matvec(&x);
    for (r, p) in residual.iter_mut().zip(&probe) {
        *r -= p;
    }
    let rel = norm2(&residual) / norm2(&probe);
    if !(rel <= 1e-6) {
        return Err(Error::RankDeficient { residual: rel });
    }
    Ok(fact)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let sol = match &self.inner {
            Inner::Llt(f) => f.solve(&rhs),
            Inner::Lu(f) => f.solve(&rhs),
        };
        (0..self.n).map(|i| sol[(i, 0)]).collect()
    }
}

/// Solver for `M z = r - C lambda`, `C^T z = 0`: the saddle augmentation that
/// keeps solves with a singular symmetric `M` orthogonal to its nullspace
/// (spanned by the columns of `C`).
///
/// Rather than factoring the bordered matrix directly (its dense border rows
/// would destroy sparsity), the matrix is regularized with point "spikes"
/// `M + alpha e_m e_m^T`, which only touch the diagonal, and the bordered
/// system is recovered exactly through a small Woodbury correction.
///
/// With an empty constraint set this degenerates to a plain direct solve, so
/// the same type serves both the regular and the singular case.
pub struct ConstrainedSolver {
    fact: Factorization,
    cons: Vec<Vec<f64>>,
    spikes: Vec<usize>,
    alpha: f64,
    yc: Vec<Vec<f64>>,
    ye: Vec<Vec<f64>>,
    reduced: SmallLu,
    n: usize,
}

impl ConstrainedSolver {
    pub fn new(m: &CsrMatrix, constraints: &[Vec<f64>], spd: bool) -> Result<Self> {
        let n = m.nrows();
        for c in constraints {
            if c.len() != n {
                return Err(Error::Dimension(format!(
                    "constraint length {} does not match matrix dimension {n}",
                    c.len()
                )));
            }
        }
        if constraints.is_empty() {
            return Ok(ConstrainedSolver {
                fact: factorize(m, spd)?,
                cons: Vec::new(),
                spikes: Vec::new(),
                alpha: 0.0,
                yc: Vec::new(),
                ye: Vec::new(),
                reduced: SmallLu::identity(0),
                n,
            });
        }

        let spikes = pick_spikes(constraints, n)?;
        let diag = m.diagonal();
        let mean_diag = diag.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
        let alpha = if mean_diag > 0.0 { mean_diag } else { 1.0 };

        let mut triplets: Vec<(usize, usize, f64)> = m.iter().collect();
        for &s in &spikes {
            triplets.push((s, s, alpha));
        }
        let spiked = CsrMatrix::from_triplets(n, n, &triplets);
        let fact = factorize(&spiked, spd)?;

        let yc: Vec<Vec<f64>> = constraints.iter().map(|c| fact.solve(c)).collect();
        let ye: Vec<Vec<f64>> = spikes
            .iter()
            .map(|&s| {
                let mut e = vec![0.0; n];
                e[s] = 1.0;
                fact.solve(&e)
            })
            .collect();

        // Reduced system for the multipliers (lambda) and spike corrections
        // (t = E^T z):
        //   [ C^T Yc   -alpha C^T Ye ] [lambda]   [C^T y]
        //   [ E^T Yc   I - alpha E^T Ye ] [t]   = [E^T y]
        let c = constraints.len();
        let dim = 2 * c;
        let mut k = vec![0.0f64; dim * dim];
        for (bi, cvec) in constraints.iter().enumerate() {
            for (bj, y) in yc.iter().enumerate() {
                k[bi * dim + bj] = dot(cvec, y);
            }
            for (bj, y) in ye.iter().enumerate() {
                k[bi * dim + (c + bj)] = -alpha * dot(cvec, y);
            }
        }
        for (bi, &s) in spikes.iter().enumerate() {
            for (bj, y) in yc.iter().enumerate() {
                k[(c + bi) * dim + bj] = y[s];
            }
            for (bj, y) in ye.iter().enumerate() {
                let mut v = -alpha * y[s];
                if bi == bj {
                    v += 1.0;
                }
                k[(c + bi) * dim + (c + bj)] = v;
            }
        }
        let reduced = SmallLu::new(k, dim)?;

        Ok(ConstrainedSolver {
            fact,
            cons: constraints.to_vec(),
            spikes,
            alpha,
            yc,
            ye,
            reduced,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_constraints(&self) -> usize {
        self.cons.len()
    }

    /// Solve, returning the solution and the constraint multipliers.
    pub fn solve_with_multipliers(&self, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let y = self.fact.solve(r);
        if self.cons.is_empty() {
            return (y, Vec::new());
        }
        let c = self.cons.len();
        let mut rhs = vec![0.0; 2 * c];
        for (bi, cvec) in self.cons.iter().enumerate() {
            rhs[bi] = dot(cvec, &y);
        }
        for (bi, &s) in self.spikes.iter().enumerate() {
            rhs[c + bi] = y[s];
        }
        let lam_t = self.reduced.solve(&rhs);
        let mut z = y;
        for (bj, yv) in self.yc.iter().enumerate() {
            super::axpy(-lam_t[bj], yv, &mut z);
        }
        for (bj, yv) in self.ye.iter().enumerate() {
            super::axpy(self.alpha * lam_t[c + bj], yv, &mut z);
        }
        (z, lam_t[..c].to_vec())
    }

    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        self.solve_with_multipliers(r).0
    }
}

/// Choose one spike index per constraint so that the submatrix of constraint
/// rows at those indices is invertible (pivoted elimination on copies).
fn pick_spikes(constraints: &[Vec<f64>], n: usize) -> Result<Vec<usize>> {
    let c = constraints.len();
    let mut work: Vec<Vec<f64>> = constraints.to_vec();
    let mut spikes = Vec::with_capacity(c);
    for step in 0..c {
        let (best, bestval) = (0..n)
            .map(|i| (i, work[step][i].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if bestval == 0.0 {
            return Err(Error::Factorization(
                "constraint vectors are linearly dependent".into(),
            ));
        }
        spikes.push(best);
        let pivot = work[step][best];
        for upd in (step + 1)..c {
            let factor = work[upd][best] / pivot;
            for i in 0..n {
                let sub = factor * work[step][i];
                work[upd][i] -= sub;
            }
            work[upd][best] = 0.0;
        }
    }
    spikes.sort_unstable();
    spikes.dedup();
    if spikes.len() != c {
        return Err(Error::Factorization(
            "could not find independent spike rows for the constraints".into(),
        ));
    }
    Ok(spikes)
}

/// Dense LU with partial pivoting for the tiny reduced systems (dim <= 4).
struct SmallLu {
    lu: Vec<f64>,
    perm: Vec<usize>,
    n: usize,
}

impl SmallLu {
    fn identity(n: usize) -> Self {
        let mut lu = vec![0.0; n * n];
        for i in 0..n {
            lu[i * n + i] = 1.0;
        }
        SmallLu {
            lu,
            perm: (0..n).collect(),
            n,
        }
    }

    fn new(mut a: Vec<f64>, n: usize) -> Result<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 {
                return Err(Error::Factorization("singular reduced system".into()));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            for i in (k + 1)..n {
                let f = a[i * n + k] / a[k * n + k];
                a[i * n + k] = f;
                for j in (k + 1)..n {
                    let sub = f * a[k * n + j];
                    a[i * n + j] -= sub;
                }
            }
        }
        Ok(SmallLu { lu: a, perm, n })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{axpy, norm_inf};

    #[test]
    fn identity_solve_is_identity() {
        let a = CsrMatrix::identity(5);
        let f = factorize(&a, true).unwrap();
        let b = vec![1.0, -2.0, 3.0, 0.0, 5.0];
        assert_eq!(f.solve(&b), b);
    }

    #[test]
    fn small_spd_solve() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let f = factorize(&a, true).unwrap();
        let x = f.solve(&[3.0, 3.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unsymmetric_lu_solve() {
        let a = CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 1, 1.0), (1, 0, 2.0), (1, 2, 1.0), (2, 2, 3.0), (0, 0, 0.5)],
        );
        let f = factorize(&a, false).unwrap();
        let x_true = vec![1.0, -2.0, 0.5];
        let b = a.matvec(&x_true);
        let x = f.solve(&b);
        let diff: Vec<f64> = x.iter().zip(&x_true).map(|(a, b)| a - b).collect();
        assert!(norm_inf(&diff) < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        // rank 1
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(factorize(&a, false).is_err());
    }

    #[test]
    fn solve_residuals_over_random_rhs() {
        // Small SPD mass-like matrix; the factor/solve contract demands
        // relative residuals at the 1e-10 level over many right-hand sides.
        let n = 40;
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, 4.0));
            if i + 1 < n {
                triplets.push((i, i + 1, 1.0));
                triplets.push((i + 1, i, 1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &triplets);
        let f = factorize(&a, true).unwrap();
        let mut rng = Lcg::new(7);
        for _ in 0..100 {
            let b = rng.vector(n);
            let x = f.solve(&b);
            let mut r = a.matvec(&x);
            axpy(-1.0, &b, &mut r);
            assert!(norm2(&r) <= 1e-10 * norm2(&b));
        }
    }

    #[test]
    fn constrained_solver_enforces_orthogonality() {
        // Singular PSD matrix: graph Laplacian of a path, nullspace = span{1}.
        let n = 6;
        let mut triplets = Vec::new();
        for i in 0..n - 1 {
            triplets.push((i, i, 1.0));
            triplets.push((i + 1, i + 1, 1.0));
            triplets.push((i, i + 1, -1.0));
            triplets.push((i + 1, i, -1.0));
        }
        let m = CsrMatrix::from_triplets(n, n, &triplets);
        let ones = vec![1.0; n];
        let solver = ConstrainedSolver::new(&m, &[ones.clone()], true).unwrap();

        let mut rng = Lcg::new(99);
        for _ in 0..50 {
            let r = rng.vector(n);
            let (z, lam) = solver.solve_with_multipliers(&r);
            // z orthogonal to the nullspace
            assert!(dot(&z, &ones).abs() <= 1e-12 * norm2(&z).max(1.0));
            // M z = r - lambda * 1 up to solver precision
            let mut res = m.matvec(&z);
            axpy(-1.0, &r, &mut res);
            axpy(lam[0], &ones, &mut res);
            assert!(norm2(&res) <= 1e-10 * norm2(&r));
        }
    }

    #[test]
    fn constrained_solver_with_rhs_in_span() {
        // r entirely in the nullspace direction: z = 0, multiplier absorbs r.
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 1.0)]);
        let k = vec![1.0, 1.0];
        let solver = ConstrainedSolver::new(&m, &[k.clone()], true).unwrap();
        let (z, _) = solver.solve_with_multipliers(&k);
        assert!(norm2(&z) <= 1e-12);
    }

    #[test]
    fn empty_constraints_degenerate_to_plain_solve() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 4.0)]);
        let s = ConstrainedSolver::new(&a, &[], true).unwrap();
        let x = s.solve(&[2.0, 4.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }
}
