
use super::Lcg;
use crate::{Error, Result};

/// Hard cap for the dense oracle paths.
const MAX_DENSE_DIM: usize = 3000;

/// Small dense matrix in row-major storage, used only by oracle-scale code.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        DenseMatrix {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn from_fn(n_rows: usize, n_cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n_rows, n_cols);
        for i in 0..n_rows {
            for j in 0..n_cols {
                m.data[i * n_cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.n_rows
    }

    pub fn ncols(&self) -> usize {
        self.n_cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n_cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.at(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[f64]) {
        for i in 0..self.n_rows {
            self.set(i, j, col[i]);
        }
    }

    fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.n_rows, self.n_cols, |i, j| self.at(i, j))
    }

    /// `W^T A W` for a projection/whitening matrix `W`.
    fn congruence(&self, w: &DenseMatrix) -> DenseMatrix {
        let a = self.to_faer();
        let wf = w.to_faer();
        let out = wf.transpose() * &a * &wf;
        DenseMatrix::from_fn(w.n_cols, w.n_cols, |i, j| out[(i, j)])
    }
}

/// Eigenvalues of the dense symmetric pencil `A v = lambda B v` with `B`
/// symmetric positive semidefinite.
///
/// The pencil may be singular; the nullspace of `B` is deflated explicitly
/// (eigendecomposition of `B`, dropping directions below a relative
/// threshold) before the reduction to a standard symmetric problem, so only
/// the finite eigenvalues on the complement of `null(B)` are returned, in
/// ascending order.
pub fn dense_generalized_eig(a: &DenseMatrix, b: &DenseMatrix) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::Dimension("generalized eig needs square operands".into()));
    }
    if n > MAX_DENSE_DIM {
        return Err(Error::TooLarge(format!(
            "dense generalized eigensolver limited to dimension {MAX_DENSE_DIM}, got {n}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let evd = b
        .to_faer()
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Factorization(format!("eigendecomposition: {e:?}")))?;
    let s = evd.S().column_vector().to_owned();
    let u = evd.U();
    let lam_max = (0..n).fold(0.0f64, |m, i| m.max(s[i].abs()));
    let tol = lam_max * 1e-12;
    let kept: Vec<usize> = (0..n).filter(|&i| s[i] > tol).collect();
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    // Whitening basis W = U_+ diag(lambda_+^{-1/2}); then W^T B W = I.
    let mut w = DenseMatrix::zeros(n, kept.len());
    for (jj, &j) in kept.iter().enumerate() {
        let scale = 1.0 / s[j].sqrt();
        for i in 0..n {
            w.set(i, jj, u[(i, j)] * scale);
        }
    }
    let reduced = a.congruence(&w);
    let evd2 = reduced
        .to_faer()
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Factorization(format!("eigendecomposition: {e:?}")))?;
    let s2 = evd2.S().column_vector().to_owned();
    let mut out: Vec<f64> = (0..kept.len()).map(|i| s2[i]).collect();
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

/// Orthonormal basis of the orthogonal complement of `span(vectors)` in
/// `R^n`, as the columns of an `n x (n - rank)` matrix.
///
/// With `seed = 0` the completion is grown deterministically from the
/// standard basis; other seeds start from a pseudo-random basis, which is
/// useful for checking that downstream results do not depend on this choice.
pub fn orthonormal_complement(vectors: &[Vec<f64>], n: usize, seed: u64) -> DenseMatrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for b in &basis {
            let c = super::dot(&w, b);
            super::axpy(-c, b, &mut w);
        }
        let nrm = super::norm2(&w);
        if nrm > 1e-12 * super::norm2(v).max(1.0) {
            super::scale(1.0 / nrm, &mut w);
            basis.push(w);
        }
    }
    let rank = basis.len();
    let mut rng = Lcg::new(seed);
    let mut complement: Vec<Vec<f64>> = Vec::new();
    let mut cand = 0usize;
    while complement.len() < n - rank {
        let mut w = if seed == 0 {
            let mut e = vec![0.0; n];
            e[cand % n] = 1.0;
            e
        } else {
            rng.vector(n)
        };
        cand += 1;
        for b in basis.iter().chain(complement.iter()) {
            let c = super::dot(&w, b);
            super::axpy(-c, b, &mut w);
        }
        // Repeat the sweep once; plain Gram-Schmidt loses orthogonality.
        for b in basis.iter().chain(complement.iter()) {
            let c = super::dot(&w, b);
            super::axpy(-c, b, &mut w);
        }
        let nrm = super::norm2(&w);
        if nrm > 1e-8 {
            super::scale(1.0 / nrm, &mut w);
            complement.push(w);
        }
    }
    let mut m = DenseMatrix::zeros(n, n - rank);
    for (j, w) in complement.iter().enumerate() {
        m.set_column(j, w);
    }
    m
}
