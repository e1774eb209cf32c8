//! Preconditioned Krylov solvers.
//!
//! [`minres`] is the three-term recurrence for symmetric (possibly singular,
//! consistent) systems with a symmetric positive semidefinite preconditioner;
//! the Lanczos scalars `delta_j` / `gamma_j` it generates are recorded so
//! inf-sup estimates can be recovered from the same run. [`gmres`] is full
//! (non-restarted) GMRES with right preconditioning, modified Gram-Schmidt
//! and one conditional re-orthogonalization pass.

use std::time::Instant;

use crate::linalg::{axpy, dot, norm2, scale};
use crate::{Error, Result};

/// Something that can apply a square matrix.
pub trait Operator {
    fn dim(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }
}

impl Operator for crate::linalg::CsrMatrix {
    fn dim(&self) -> usize {
        assert_eq!(self.nrows(), self.ncols());
        self.nrows()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_into(x, y);
    }
}

impl Operator for crate::assembly::SaddleSystem {
    fn dim(&self) -> usize {
        crate::assembly::SaddleSystem::dim(self)
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        crate::assembly::SaddleSystem::apply_into(self, x, y);
    }
}

/// Preconditioner contract: given a residual, return `z ~ P^{-1} r`.
///
/// For MINRES the apply must realise a fixed symmetric positive semidefinite
/// operator across iterations; the inner products `<z, v>` feeding the
/// recurrence square roots fail otherwise.
pub trait Preconditioner {
    fn dim(&self) -> usize;
    fn apply(&self, r: &[f64]) -> Vec<f64>;

    /// Self-description used in reports.
    fn describe(&self) -> String {
        "unnamed preconditioner".into()
    }
}

/// Identity preconditioner.
pub struct IdentityPrecond(pub usize);

impl Preconditioner for IdentityPrecond {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Convergence history and byproducts of one Krylov solve.
#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// `residual_history[0]` is the initial residual norm; entry `j` the norm
    /// after iteration `j`. MINRES records the preconditioned norm driven by
    /// its recurrence, GMRES the true Euclidean norm.
    pub residual_history: Vec<f64>,
    /// Lanczos diagonal `delta_1..delta_j` (MINRES only).
    pub lanczos_delta: Vec<f64>,
    /// Lanczos scalars `gamma_1..gamma_{j+1}` (MINRES only); the tridiagonal
    /// off-diagonals start at `gamma_2`.
    pub lanczos_gamma: Vec<f64>,
    /// Per-iteration inf-sup estimates when requested.
    pub infsup_history: Vec<Option<f64>>,
    pub solution: Vec<f64>,
    pub wall_time: f64,
    pub preconditioner: String,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&f64::NAN)
    }

    /// Write `iter,residual[,infsup_estimate]` CSV.
    pub fn write_history_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let with_infsup = !self.infsup_history.is_empty();
        if with_infsup {
            writeln!(w, "iter,residual,infsup_estimate")?;
        } else {
            writeln!(w, "iter,residual")?;
        }
        for (i, r) in self.residual_history.iter().enumerate() {
            if with_infsup {
                let est = i
                    .checked_sub(1)
                    .and_then(|j| self.infsup_history.get(j).copied().flatten());
                match est {
                    Some(v) => writeln!(w, "{},{},{}", i, r, v)?,
                    None => writeln!(w, "{},{},", i, r)?,
                }
            } else {
                writeln!(w, "{},{}", i, r)?;
            }
        }
        Ok(())
    }
}

/// Options for [`minres`].
pub struct MinresOptions<'a> {
    /// Stop when the preconditioned residual norm falls below
    /// `rtol * initial`.
    pub rtol: f64,
    pub maxit: usize,
    pub x0: Option<&'a [f64]>,
    /// Record per-iteration inf-sup estimates from the Lanczos tridiagonal.
    pub record_infsup: bool,
}

impl Default for MinresOptions<'_> {
    fn default() -> Self {
        MinresOptions {
            rtol: 1e-8,
            maxit: 500,
            x0: None,
            record_infsup: false,
        }
    }
}

/// Preconditioned MINRES.
///
/// The loop mirrors the usual statement of the preconditioned algorithm line
/// by line (`v` residual-direction vectors, `z` preconditioned vectors,
/// `gamma_j = sqrt(<z_j, v_j>)`, `delta_j = <A z_j, z_j>`, Givens scalars
/// `c, s`, solution directions `w`), so the scalars driving the recurrence
/// are exactly the Lanczos coefficients reported for inf-sup estimation. The
/// recurrence value `|eta|` equals the preconditioner-norm residual and is
/// monotone by construction.
pub fn minres(
    a: &dyn Operator,
    b: &[f64],
    p: &dyn Preconditioner,
    opts: &MinresOptions,
) -> Result<SolveReport> {
    let n = a.dim();
    if b.len() != n || p.dim() != n {
        return Err(Error::Dimension("minres operand sizes disagree".into()));
    }
    let start = Instant::now();

    // v0 = 0, w0 = w1 = 0, gamma0 = 0
    let mut v_prev = vec![0.0; n];
    let mut w_prev = vec![0.0; n];
    let mut w_cur = vec![0.0; n];
    let mut gamma_prev = 0.0f64;

    // x = x0, v1 = b - A x0
    let mut x = opts.x0.map(|x0| x0.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut v_cur = if opts.x0.is_some() {
        let ax = a.apply(&x);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    } else {
        b.to_vec()
    };

    // z1: P z1 = v1, gamma1 = sqrt(<z1, v1>)
    let mut z = p.apply(&v_cur);
    let mut gamma_cur = sqrt_inner(&z, &v_cur)?;

    let mut report = SolveReport {
        preconditioner: p.describe(),
        ..Default::default()
    };
    report.residual_history.push(gamma_cur);
    report.lanczos_gamma.push(gamma_cur);

    if gamma_cur == 0.0 {
        // Zero (preconditioned) residual at the start.
        report.converged = true;
        report.solution = x;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    // eta = gamma1, s0 = s1 = 0, c0 = c1 = 1
    let mut eta = gamma_cur;
    let (mut s_prev, mut s_cur) = (0.0f64, 0.0f64);
    let (mut c_prev, mut c_cur) = (1.0f64, 1.0f64);
    let tol = opts.rtol * gamma_cur;

    for j in 1..=opts.maxit {
        // z_j = z_j / gamma_j
        scale(1.0 / gamma_cur, &mut z);
        // delta_j = <A z_j, z_j>
        let az = a.apply(&z);
        let delta = dot(&az, &z);
        report.lanczos_delta.push(delta);

        // v_{j+1} = A z_j - (delta_j / gamma_j) v_j - (gamma_j / gamma_{j-1}) v_{j-1}
        let mut v_next = az;
        axpy(-delta / gamma_cur, &v_cur, &mut v_next);
        if j > 1 {
            axpy(-gamma_cur / gamma_prev, &v_prev, &mut v_next);
        }
        // P z_{j+1} = v_{j+1}; gamma_{j+1} = sqrt(<z_{j+1}, v_{j+1}>)
        let z_next = p.apply(&v_next);
        let gamma_next = sqrt_inner(&z_next, &v_next)?;
        report.lanczos_gamma.push(gamma_next);

        // Givens update
        let alpha0 = c_cur * delta - c_prev * s_cur * gamma_cur;
        let alpha1 = (alpha0 * alpha0 + gamma_next * gamma_next).sqrt();
        let alpha2 = s_cur * delta + c_prev * c_cur * gamma_cur;
        let alpha3 = s_prev * gamma_cur;
        let c_next = alpha0 / alpha1;
        let s_next = gamma_next / alpha1;

        // w_{j+1} = (z_j - alpha3 w_{j-1} - alpha2 w_j) / alpha1
        let mut w_next = z.clone();
        axpy(-alpha3, &w_prev, &mut w_next);
        axpy(-alpha2, &w_cur, &mut w_next);
        scale(1.0 / alpha1, &mut w_next);

        // x_j = x_{j-1} + c_{j+1} eta w_{j+1}; eta = -s_{j+1} eta
        axpy(c_next * eta, &w_next, &mut x);
        eta = -s_next * eta;

        report.iterations = j;
        report.residual_history.push(eta.abs());
        if opts.record_infsup {
            report.infsup_history.push(crate::infsup::est_minres(
                &report.lanczos_delta,
                &report.lanczos_gamma,
                j,
            ));
        }

        if eta.abs() < tol {
            report.converged = true;
            break;
        }
        if gamma_next == 0.0 {
            // Krylov space exhausted: the iterate is exact in exact
            // arithmetic.
            report.converged = eta.abs() < tol;
            break;
        }

        v_prev = v_cur;
        v_cur = v_next;
        z = z_next;
        gamma_prev = gamma_cur;
        gamma_cur = gamma_next;
        w_prev = w_cur;
        w_cur = w_next;
        s_prev = s_cur;
        s_cur = s_next;
        c_prev = c_cur;
        c_cur = c_next;
    }

    report.solution = x;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

fn sqrt_inner(z: &[f64], v: &[f64]) -> Result<f64> {
    let inner = dot(z, v);
    if inner < 0.0 {
        let scale = norm2(z) * norm2(v);
        if inner.abs() > 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::IndefinitePreconditioner(inner));
        }
        return Ok(0.0);
    }
    Ok(inner.sqrt())
}

/// Stopping rule for [`gmres`].
#[derive(Clone, Copy, Debug)]
pub enum GmresTol {
    /// Stop when the residual norm falls below `rtol * ||r0||`.
    Relative(f64),
    /// Stop when the residual norm falls below the given absolute value.
    Absolute(f64),
}

impl GmresTol {
    fn threshold(self, r0: f64) -> f64 {
        match self {
            GmresTol::Relative(rtol) => rtol * r0,
            GmresTol::Absolute(atol) => atol,
        }
    }
}

pub struct GmresOptions<'a> {
    pub tol: GmresTol,
    pub maxit: usize,
    pub x0: Option<&'a [f64]>,
}

impl Default for GmresOptions<'_> {
    fn default() -> Self {
        GmresOptions {
            tol: GmresTol::Relative(1e-8),
            maxit: 400,
            x0: None,
        }
    }
}

/// Full GMRES, right-preconditioned: minimizes the true Euclidean residual
/// `|| b - A (x0 + M^{-1} V y) ||` over the Krylov space, so the recorded
/// history is the unpreconditioned residual norm.
pub fn gmres(
    a: &dyn Operator,
    b: &[f64],
    m: &dyn Preconditioner,
    opts: &GmresOptions,
) -> Result<SolveReport> {
    let n = a.dim();
    if b.len() != n || m.dim() != n {
        return Err(Error::Dimension("gmres operand sizes disagree".into()));
    }
    let start = Instant::now();
    let x0 = opts.x0.map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let r0: Vec<f64> = {
        let ax = a.apply(&x0);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    };
    let beta = norm2(&r0);

    let mut report = SolveReport {
        preconditioner: m.describe(),
        ..Default::default()
    };
    report.residual_history.push(beta);
    let threshold = opts.tol.threshold(beta);
    if beta <= threshold || opts.maxit == 0 {
        report.converged = beta <= threshold;
        report.solution = x0;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    // Arnoldi basis (orthonormal), Hessenberg column storage, and the Givens
    // rotations applied to it.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(opts.maxit + 1);
    let mut v0 = r0;
    scale(1.0 / beta, &mut v0);
    basis.push(v0);
    let mut h_cols: Vec<Vec<f64>> = Vec::with_capacity(opts.maxit);
    let mut cs: Vec<f64> = Vec::with_capacity(opts.maxit);
    let mut sn: Vec<f64> = Vec::with_capacity(opts.maxit);
    let mut g = vec![beta];
    let mut converged = false;

    for j in 0..opts.maxit {
        let mut w = a.apply(&m.apply(&basis[j]));
        let norm_before = norm2(&w);
        let mut h = vec![0.0; j + 2];
        for (i, vi) in basis.iter().enumerate() {
            let hij = dot(&w, vi);
            h[i] = hij;
            axpy(-hij, vi, &mut w);
        }
        // One re-orthogonalization pass when cancellation ate most of w.
        if norm2(&w) < 0.7 * norm_before {
            for (i, vi) in basis.iter().enumerate() {
                let corr = dot(&w, vi);
                h[i] += corr;
                axpy(-corr, vi, &mut w);
            }
        }
        let h_last = norm2(&w);
        h[j + 1] = h_last;

        // Apply the accumulated rotations to the new column, then a new one.
        for i in 0..j {
            let t = cs[i] * h[i] + sn[i] * h[i + 1];
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
            h[i] = t;
        }
        let denom = (h[j] * h[j] + h[j + 1] * h[j + 1]).sqrt();
        let (c, s) = if denom == 0.0 {
            (1.0, 0.0)
        } else {
            (h[j] / denom, h[j + 1] / denom)
        };
        cs.push(c);
        sn.push(s);
        h[j] = c * h[j] + s * h[j + 1];
        h[j + 1] = 0.0;
        g.push(-s * g[j]);
        g[j] *= c;
        h_cols.push(h);

        let res = g[j + 1].abs();
        report.iterations = j + 1;
        report.residual_history.push(res);

        let happy = h_last <= 1e-14 * norm_before.max(1.0);
        if res <= threshold || happy {
            converged = true;
            break;
        }
        scale(1.0 / h_last, &mut w);
        basis.push(w);
    }

    // Back-substitution for y, then x = x0 + M^{-1} (V y).
    let k = report.iterations;
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let mut acc = g[i];
        for (l, yl) in y.iter().enumerate().take(k).skip(i + 1) {
            acc -= h_cols[l][i] * yl;
        }
        y[i] = acc / h_cols[i][i];
    }
    let mut vy = vec![0.0; n];
    for (l, yl) in y.iter().enumerate() {
        axpy(*yl, &basis[l], &mut vy);
    }
    let correction = m.apply(&vy);
    let mut x = x0;
    axpy(1.0, &correction, &mut x);

    report.converged = converged;
    report.solution = x;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}
