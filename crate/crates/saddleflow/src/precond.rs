//! Block preconditioners for the saddle-point systems.
//!
//! Stokes systems get block-diagonal preconditioners: exact velocity solves
//! paired with either an exact (nullspace-constrained) pressure mass solve or
//! a fixed number of Chebyshev-accelerated symmetric Gauss-Seidel sweeps.
//! Oseen systems get block upper-triangular right preconditioners whose
//! Schur approximations are the scaled pressure mass matrix, the two-field
//! pressure convection-diffusion operator, or the least-squares commutator.
//! [`two_stage_solve`] combines a reduced-system pressure
//! convection-diffusion stage with a mass-preconditioned refinement stage.

use std::cell::Cell;

use crate::assembly::{DofMap, PcdOperators, SaddleSystem};
use crate::krylov::{gmres, GmresOptions, GmresTol, Preconditioner, SolveReport};
use crate::linalg::{
    axpy, dot, factorize, norm2, scale, ConstrainedSolver, CsrMatrix, Factorization, Lcg,
};
use crate::{Error, Result};

/// Preconditioner selector used by drivers and the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecondId {
    P1,
    P2,
    M1,
    M2,
    M3,
    TwoStage,
}

impl PrecondId {
    pub fn name(self) -> &'static str {
        match self {
            PrecondId::P1 => "p1",
            PrecondId::P2 => "p2",
            PrecondId::M1 => "m1",
            PrecondId::M2 => "m2",
            PrecondId::M3 => "m3",
            PrecondId::TwoStage => "two-stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(PrecondId::P1),
            "p2" => Ok(PrecondId::P2),
            "m1" => Ok(PrecondId::M1),
            "m2" => Ok(PrecondId::M2),
            "m3" => Ok(PrecondId::M3),
            "two-stage" | "twostage" | "two_stage" => Ok(PrecondId::TwoStage),
            other => Err(Error::Config(format!("unknown preconditioner `{other}`"))),
        }
    }
}

/// How large a nullspace component of a pressure residual must be, relative
/// to the residual itself, before it is counted as consistency drift.
const DRIFT_TOL: f64 = 1e-8;

enum MassApprox {
    Exact(ConstrainedSolver),
    Cheb(ChebSgs),
}

/// Block-diagonal Stokes preconditioner: exact velocity solve plus a
/// pressure mass solve (exact and nullspace-constrained, or Chebyshev/SGS).
pub struct StokesBlockDiag {
    a_solve: Factorization,
    mass: MassApprox,
    frame: Option<Vec<f64>>,
    n_u: usize,
    n_p: usize,
    drift_warnings: Cell<usize>,
    label: String,
}

impl StokesBlockDiag {
    /// Exact solves on both blocks; the pressure mass solve is constrained
    /// to the complement of the frame vector when the space is enriched.
    pub fn p1(sys: &SaddleSystem, mq_full: &CsrMatrix, dm: &DofMap) -> Result<Self> {
        let a_solve = factorize(&sys.f_block, true)?;
        let constraints: Vec<Vec<f64>> = dm.frame_vector().into_iter().collect();
        let augmented = !constraints.is_empty();
        let mass = ConstrainedSolver::new(mq_full, &constraints, true)?;
        Ok(StokesBlockDiag {
            a_solve,
            mass: MassApprox::Exact(mass),
            frame: dm.frame_vector(),
            n_u: sys.n_u(),
            n_p: sys.n_p(),
            drift_warnings: Cell::new(0),
            label: if augmented {
                "blockdiag(exact velocity solve, constrained pressure mass solve)".into()
            } else {
                "blockdiag(exact velocity solve, pressure mass solve)".into()
            },
        })
    }

    /// Exact velocity solve plus `steps` Chebyshev/SGS iterations on the
    /// pressure mass matrix.
    pub fn p2(sys: &SaddleSystem, mq_full: &CsrMatrix, dm: &DofMap, steps: usize) -> Result<Self> {
        let a_solve = factorize(&sys.f_block, true)?;
        let cheb = ChebSgs::new(mq_full, dm.frame_vector(), steps)?;
        let label = format!(
            "blockdiag(exact velocity solve, {} Chebyshev/SGS steps, lambda_max {:.4})",
            steps,
            cheb.lambda_max()
        );
        Ok(StokesBlockDiag {
            a_solve,
            mass: MassApprox::Cheb(cheb),
            frame: dm.frame_vector(),
            n_u: sys.n_u(),
            n_p: sys.n_p(),
            drift_warnings: Cell::new(0),
            label,
        })
    }

    /// Number of applies whose pressure residual had a nullspace component
    /// beyond tolerance (finite-precision drift).
    pub fn drift_warnings(&self) -> usize {
        self.drift_warnings.get()
    }
}

impl Preconditioner for StokesBlockDiag {
    fn dim(&self) -> usize {
        self.n_u + self.n_p
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let (r_u, r_p) = r.split_at(self.n_u);
        if let Some(k) = &self.frame {
            let drift = dot(k, r_p).abs();
            if drift > DRIFT_TOL * norm2(r_p).max(f64::MIN_POSITIVE) * (k.len() as f64).sqrt() {
                self.drift_warnings.set(self.drift_warnings.get() + 1);
            }
        }
        let mut z = self.a_solve.solve(r_u);
        let z_p = match &self.mass {
            MassApprox::Exact(s) => s.solve(r_p),
            MassApprox::Cheb(c) => c.solve(r_p),
        };
        z.extend(z_p);
        z
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Fixed-step Chebyshev semi-iteration accelerating symmetric Gauss-Seidel
/// on a symmetric positive semidefinite mass matrix.
///
/// The SGS iteration matrix `G = I - Msgs^{-1} M` has spectrum in
/// `[0, lambda_max]` on the complement of the nullspace; `lambda_max`
/// approaches 1 under mesh refinement for the frame mass matrix, which is
/// what degrades this approximation on fine grids. With a fixed step count
/// and a fixed interval the induced operator is linear, symmetric and
/// positive semidefinite, as the MINRES outer iteration requires.
pub struct ChebSgs {
    m: CsrMatrix,
    steps: usize,
    lambda_max: f64,
    theta: f64,
    delta: f64,
    nullspace: Option<Vec<f64>>,
}

impl ChebSgs {
    pub fn new(m: &CsrMatrix, nullspace: Option<Vec<f64>>, steps: usize) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension("mass matrix must be square".into()));
        }
        let diag = m.diagonal();
        if diag.iter().any(|&d| d <= 0.0) {
            return Err(Error::Factorization(
                "mass matrix has nonpositive diagonal entries".into(),
            ));
        }
        let mut cheb = ChebSgs {
            m: m.clone(),
            steps: steps.max(1),
            lambda_max: 0.0,
            theta: 1.0,
            delta: 0.0,
            nullspace,
        };
        cheb.lambda_max = cheb.estimate_lambda_max(30);
        // Chebyshev interval [1 - lambda_max, 1] for the preconditioned
        // spectrum.
        cheb.theta = 1.0 - cheb.lambda_max / 2.0;
        cheb.delta = cheb.lambda_max / 2.0;
        Ok(cheb)
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    fn project(&self, v: &mut [f64]) {
        if let Some(k) = &self.nullspace {
            let c = dot(k, v) / dot(k, k);
            axpy(-c, k, v);
        }
    }

    /// `Msgs^{-1} r` with `Msgs = (D + L) D^{-1} (D + U)`.
    fn sgs_solve(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let mut t = vec![0.0; n];
        for i in 0..n {
            let (cols, vals) = self.m.row(i);
            let mut acc = r[i];
            let mut diag = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                if j < i {
                    acc -= v * t[j];
                } else if j == i {
                    diag = v;
                }
            }
            t[i] = acc / diag;
        }
        // u = D t, then (D + U) z = u.
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let (cols, vals) = self.m.row(i);
            let mut diag = 0.0;
            let mut acc = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                if j > i {
                    acc += v * z[j];
                } else if j == i {
                    diag = v;
                }
            }
            z[i] = (diag * t[i] - acc) / diag;
        }
        z
    }

    /// Largest eigenvalue of the SGS iteration matrix on the nullspace
    /// complement, by power iteration with a deterministic start. Rayleigh
    /// quotients converge from below, so the estimate is padded toward 1;
    /// non-convergence falls back to the 0.999 safeguard.
    fn estimate_lambda_max(&self, iters: usize) -> f64 {
        let n = self.m.nrows();
        let mut x = Lcg::new(0xc4eb + n as u64).vector(n);
        self.project(&mut x);
        let nx = norm2(&x);
        if nx == 0.0 {
            return 0.0;
        }
        scale(1.0 / nx, &mut x);
        let mut lambda = 0.0;
        let mut prev = f64::NAN;
        for _ in 0..iters {
            // y = G x = x - Msgs^{-1} (M x)
            let mx = self.m.matvec(&x);
            let s = self.sgs_solve(&mx);
            let mut y = x.clone();
            axpy(-1.0, &s, &mut y);
            self.project(&mut y);
            prev = lambda;
            lambda = dot(&x, &y);
            let ny = norm2(&y);
            if ny <= 1e-14 {
                return 0.0;
            }
            x = y;
            scale(1.0 / ny, &mut x);
        }
        if lambda < 1e-12 {
            return 0.0;
        }
        if !((lambda - prev).abs() <= 1e-3 * lambda.abs()) {
            return 0.999;
        }
        (lambda + 0.02 * (1.0 - lambda)).min(0.9999)
    }

    /// The fixed Chebyshev/SGS operator applied to `r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let mut rhs = r.to_vec();
        self.project(&mut rhs);
        if self.delta <= 1e-14 {
            // SGS is already exact (diagonal matrix): one sweep solves it.
            let mut z = self.sgs_solve(&rhs);
            self.project(&mut z);
            return z;
        }
        let n = rhs.len();
        let sigma1 = self.theta / self.delta;
        let mut rho = 1.0 / sigma1;
        let mut z = vec![0.0; n];
        let mut res = rhs.clone();
        let s = self.sgs_solve(&res);
        let mut d: Vec<f64> = s.iter().map(|v| v / self.theta).collect();
        for _ in 0..self.steps {
            axpy(1.0, &d, &mut z);
            let md = self.m.matvec(&d);
            axpy(-1.0, &md, &mut res);
            let s = self.sgs_solve(&res);
            let rho_next = 1.0 / (2.0 * sigma1 - rho);
            for i in 0..n {
                d[i] = rho_next * rho * d[i] + 2.0 * rho_next / self.delta * s[i];
            }
            rho = rho_next;
        }
        self.project(&mut z);
        z
    }
}

/// Schur complement approximations available for the block-triangular Oseen
/// preconditioners.
enum SchurApprox {
    /// `(1/nu) M_Q`: solve `M_Q z = -nu r` under the nullspace constraints.
    ScaledMass { solver: ConstrainedSolver, nu: f64 },
    Pcd(PcdSchur),
    Lsc(LscSchur),
}

impl SchurApprox {
    /// `z = M_S^{-1} r`.
    fn inverse_apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            SchurApprox::ScaledMass { solver, nu } => {
                let mut z = solver.solve(r);
                scale(*nu, &mut z);
                z
            }
            SchurApprox::Pcd(pcd) => pcd.inverse_apply(r),
            SchurApprox::Lsc(lsc) => lsc.inverse_apply(r),
        }
    }
}

/// Two-field pressure convection-diffusion Schur approximation
/// `M_S = blockdiag(Q1, Q0) blockdiag(F1, F0)^{-1} (B Mdiag^{-1} B^T)`,
/// applied inversely as mass solves, a convection-diffusion multiply, and a
/// constrained solve with the velocity-scaled coupling matrix. The coupling
/// matrix shares its nullspace with the true Schur complement, so
/// constraining that solve keeps iterates orthogonal to the frame vector.
pub struct PcdSchur {
    q1_solve: Factorization,
    q0: Vec<f64>,
    f1: CsrMatrix,
    f0: CsrMatrix,
    ap_solve: ConstrainedSolver,
    n_k: usize,
    n_0: usize,
}

impl PcdSchur {
    /// Build from the assembled operators; `sys` supplies the divergence
    /// blocks (pass the reduced system for single-field preconditioning).
    pub fn new(pcd: &PcdOperators, sys: &SaddleSystem, constraints: &[Vec<f64>]) -> Result<Self> {
        let n_k = sys.n_k();
        let n_0 = sys.n_0();
        if n_0 > 0 && (pcd.q0.len() != n_0 || pcd.f0.nrows() != n_0) {
            return Err(Error::Dimension(
                "element-pressure operators do not match the system".into(),
            ));
        }
        let q1_solve = factorize(&pcd.q1, true)?;
        let b = stack_divergence(sys);
        let minv: Vec<f64> = pcd.m_diag.iter().map(|&d| 1.0 / d).collect();
        let ap = CsrMatrix::bdbt(&b, &minv);
        let ap_solve = ConstrainedSolver::new(&ap, constraints, true)?;
        Ok(PcdSchur {
            q1_solve,
            q0: pcd.q0.clone(),
            f1: pcd.f1.clone(),
            f0: pcd.f0.clone(),
            ap_solve,
            n_k,
            n_0,
        })
    }

    /// `z = M_S^{-1} r = (B Mdiag^{-1} B^T)^{-1} blockdiag(F1, F0)
    /// blockdiag(Q1, Q0)^{-1} r`.
    pub fn inverse_apply(&self, r: &[f64]) -> Vec<f64> {
        let (r1, r0) = r.split_at(self.n_k);
        let y1 = self.q1_solve.solve(r1);
        let mut y = self.f1.matvec(&y1);
        if self.n_0 > 0 {
            let y0: Vec<f64> = r0.iter().zip(&self.q0).map(|(ri, qi)| ri / qi).collect();
            y.extend(self.f0.matvec(&y0));
        }
        self.ap_solve.solve(&y)
    }
}

/// Least-squares commutator Schur approximation
/// `M_S = (B H^{-1} B^T) (B Mdiag^{-1} F H^{-1} B^T)^{-1} (B Mdiag^{-1} B^T)`
/// with `H = D^{-1/2} Mdiag D^{-1/2}`.
pub struct LscSchur {
    bhbt_solve: ConstrainedSolver,
    bmbt_solve: ConstrainedSolver,
    b: CsrMatrix,
    f: CsrMatrix,
    hinv: Vec<f64>,
    minv: Vec<f64>,
}

impl LscSchur {
    /// `scaling` is the diagonal `D`; `None` leaves `H = Mdiag`, the plain
    /// commutator construction.
    pub fn new(
        m_diag: &[f64],
        sys: &SaddleSystem,
        constraints: &[Vec<f64>],
        scaling: Option<&[f64]>,
    ) -> Result<Self> {
        if let Some(d) = scaling {
            if d.len() != m_diag.len() {
                return Err(Error::Dimension("scaling length mismatch".into()));
            }
            if d.iter().any(|&v| v <= 0.0) {
                return Err(Error::Config("scaling must be strictly positive".into()));
            }
        }
        let minv: Vec<f64> = m_diag.iter().map(|&d| 1.0 / d).collect();
        let hinv: Vec<f64> = match scaling {
            None => minv.clone(),
            Some(d) => d.iter().zip(m_diag).map(|(&di, &mi)| di / mi).collect(),
        };
        let b = stack_divergence(sys);
        let bhbt = CsrMatrix::bdbt(&b, &hinv);
        let bmbt = CsrMatrix::bdbt(&b, &minv);
        Ok(LscSchur {
            bhbt_solve: ConstrainedSolver::new(&bhbt, constraints, true)?,
            bmbt_solve: ConstrainedSolver::new(&bmbt, constraints, true)?,
            b,
            f: sys.f_block.clone(),
            hinv,
            minv,
        })
    }

    /// `z = M_S^{-1} r`: solve with `B H^{-1} B^T`, push through the middle
    /// operator `B Mdiag^{-1} F H^{-1} B^T` as a matvec chain, then solve
    /// with `B Mdiag^{-1} B^T`.
    pub fn inverse_apply(&self, r: &[f64]) -> Vec<f64> {
        let y1 = self.bhbt_solve.solve(r);
        let mut t = self.b.tr_matvec(&y1);
        for (ti, hi) in t.iter_mut().zip(&self.hinv) {
            *ti *= hi;
        }
        let mut t = self.f.matvec(&t);
        for (ti, mi) in t.iter_mut().zip(&self.minv) {
            *ti *= mi;
        }
        let y2 = self.b.matvec(&t);
        self.bmbt_solve.solve(&y2)
    }
}

/// Stack `[B1; B0]` into one rectangular matrix.
fn stack_divergence(sys: &SaddleSystem) -> CsrMatrix {
    let n_k = sys.n_k();
    let mut trip: Vec<(usize, usize, f64)> = sys.b1.iter().collect();
    for (i, j, v) in sys.b0.iter() {
        trip.push((n_k + i, j, v));
    }
    CsrMatrix::from_triplets(sys.n_p(), sys.n_u(), &trip)
}

/// Block upper-triangular Oseen preconditioner `[[F, B^T], [0, -M_S]]`: a
/// Schur solve `z_p = -M_S^{-1} r_p` followed by the velocity solve
/// `F z_u = r_u - B^T z_p`.
pub struct OseenBlockTri {
    f_solve: Factorization,
    b1: CsrMatrix,
    b0: CsrMatrix,
    schur: SchurApprox,
    n_u: usize,
    n_k: usize,
    label: String,
}

impl OseenBlockTri {
    /// Schur block `(1/nu) M_Q`.
    pub fn m1(sys: &SaddleSystem, mq_full: &CsrMatrix, dm: &DofMap, nu: f64) -> Result<Self> {
        let solver = ConstrainedSolver::new(mq_full, &dm.pressure_nullspace(), true)?;
        Ok(OseenBlockTri {
            f_solve: factorize(&sys.f_block, false)?,
            b1: sys.b1.clone(),
            b0: sys.b0.clone(),
            schur: SchurApprox::ScaledMass { solver, nu },
            n_u: sys.n_u(),
            n_k: sys.n_k(),
            label: "block triangular, scaled pressure mass Schur approximation".into(),
        })
    }

    /// Schur block from the two-field pressure convection-diffusion
    /// operators.
    pub fn m2(sys: &SaddleSystem, pcd: &PcdOperators, dm: &DofMap) -> Result<Self> {
        let schur = PcdSchur::new(pcd, sys, &dm.pressure_nullspace())?;
        Ok(OseenBlockTri {
            f_solve: factorize(&sys.f_block, false)?,
            b1: sys.b1.clone(),
            b0: sys.b0.clone(),
            schur: SchurApprox::Pcd(schur),
            n_u: sys.n_u(),
            n_k: sys.n_k(),
            label: "block triangular, two-field pressure convection-diffusion Schur".into(),
        })
    }

    /// Schur block from the least-squares commutator.
    pub fn m3(
        sys: &SaddleSystem,
        m_diag: &[f64],
        dm: &DofMap,
        scaling: Option<&[f64]>,
    ) -> Result<Self> {
        let schur = LscSchur::new(m_diag, sys, &dm.pressure_nullspace(), scaling)?;
        Ok(OseenBlockTri {
            f_solve: factorize(&sys.f_block, false)?,
            b1: sys.b1.clone(),
            b0: sys.b0.clone(),
            schur: SchurApprox::Lsc(schur),
            n_u: sys.n_u(),
            n_k: sys.n_k(),
            label: "block triangular, least-squares commutator Schur".into(),
        })
    }

    /// Single-field pressure convection-diffusion preconditioner for a
    /// reduced (continuous-pressure only) system.
    pub fn single_field_pcd(
        reduced: &SaddleSystem,
        pcd: &PcdOperators,
        constraints: &[Vec<f64>],
    ) -> Result<Self> {
        if reduced.n_0() != 0 {
            return Err(Error::Dimension(
                "single-field preconditioner expects a reduced system".into(),
            ));
        }
        let schur = PcdSchur::new(pcd, reduced, constraints)?;
        Ok(OseenBlockTri {
            f_solve: factorize(&reduced.f_block, false)?,
            b1: reduced.b1.clone(),
            b0: reduced.b0.clone(),
            schur: SchurApprox::Pcd(schur),
            n_u: reduced.n_u(),
            n_k: reduced.n_k(),
            label: "block triangular, single-field pressure convection-diffusion Schur".into(),
        })
    }
}

impl Preconditioner for OseenBlockTri {
    fn dim(&self) -> usize {
        self.n_u + self.b1.nrows() + self.b0.nrows()
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let (r_u, r_p) = r.split_at(self.n_u);
        let mut z_p = self.schur.inverse_apply(r_p);
        scale(-1.0, &mut z_p);
        let mut rhs_u = r_u.to_vec();
        let (z_p1, z_p0) = z_p.split_at(self.n_k);
        self.b1.tr_matvec_add(-1.0, z_p1, &mut rhs_u);
        self.b0.tr_matvec_add(-1.0, z_p0, &mut rhs_u);
        let mut z = self.f_solve.solve(&rhs_u);
        z.extend(z_p);
        z
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Configuration for [`two_stage_solve`].
#[derive(Clone, Copy, Debug)]
pub struct TwoStageConfig {
    /// Final residual target.
    pub eta: f64,
    /// Reduced-system residual factor: stage one stops at a relative
    /// reduction of `c * eta`.
    pub c: f64,
    pub maxit: usize,
    /// Interpret `eta` as a fraction of the full right-hand side norm
    /// (default) rather than as a raw absolute value.
    pub eta_scaled_by_rhs: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            eta: 1e-4,
            c: 10.0,
            maxit: 400,
            eta_scaled_by_rhs: true,
        }
    }
}

/// Result of the two-stage solve, including the residual-bound bookkeeping
/// at the stage transition.
#[derive(Clone, Debug)]
pub struct TwoStageReport {
    pub solution: Vec<f64>,
    pub step1: SolveReport,
    pub step2: SolveReport,
    /// Full-system residual norm of the intermediate iterate `[u1, q1, 0]`.
    pub transition_residual: f64,
    /// Stage-one stopping threshold `c * eta * ||b_reduced||`.
    pub step1_target: f64,
    /// `||g0 - B0 u1||`: the element-pressure block of the transition
    /// residual (the local incompressibility of the intermediate solution).
    pub b0_residual: f64,
    /// `sqrt(step1_target^2 + b0_residual^2)`: the a-priori bound on the
    /// transition residual.
    pub transition_bound: f64,
}

impl TwoStageReport {
    /// Nonnegative iff the transition residual satisfies its bound.
    pub fn bound_slack(&self) -> f64 {
        self.transition_bound.powi(2) - self.transition_residual.powi(2)
    }
}

/// Two-stage solve of an enriched Oseen system.
///
/// Stage one runs GMRES on the reduced (continuous-pressure) system with the
/// single-field pressure convection-diffusion preconditioner from a zero
/// initial guess, stopping at a relative residual of `c * eta`. Stage two
/// runs GMRES on the full system with the scaled-mass preconditioner,
/// starting from the stage-one solution padded with zero element pressures,
/// down to the absolute target `eta` (scaled by the right-hand side norm by
/// default). The transition residual obeys
/// `||z||^2 <= (c eta ||b_red||)^2 + ||g0 - B0 u1||^2`.
pub fn two_stage_solve(
    sys: &SaddleSystem,
    pcd: &PcdOperators,
    mq_full: &CsrMatrix,
    dm: &DofMap,
    nu: f64,
    cfg: &TwoStageConfig,
) -> Result<TwoStageReport> {
    if dm.n_0 == 0 {
        return Err(Error::Config(
            "the two-stage solve targets enriched systems".into(),
        ));
    }
    let reduced = sys.reduced();
    let b_red = reduced.rhs();
    let b_red_norm = norm2(&b_red);

    // Constraints for the reduced system: only the hydrostatic mode of
    // enclosed flow survives without the element pressures.
    let red_constraints: Vec<Vec<f64>> = if dm.problem.enclosed() {
        vec![vec![1.0; dm.n_k]]
    } else {
        Vec::new()
    };
    let m_red = OseenBlockTri::single_field_pcd(&reduced, pcd, &red_constraints)?;
    let step1 = gmres(
        &reduced,
        &b_red,
        &m_red,
        &GmresOptions {
            tol: GmresTol::Relative(cfg.c * cfg.eta),
            maxit: cfg.maxit,
            x0: None,
        },
    )?;
    if !step1.converged {
        return Err(Error::Solver(format!(
            "stage one stalled at residual {:.3e} after {} iterations",
            step1.final_residual(),
            step1.iterations
        )));
    }

    // Intermediate iterate [u1, q1, 0] on the full system.
    let mut x_mid = step1.solution.clone();
    x_mid.resize(sys.dim(), 0.0);

    let b_full = sys.rhs();
    let target = if cfg.eta_scaled_by_rhs {
        cfg.eta * norm2(&b_full)
    } else {
        cfg.eta
    };
    let m1 = OseenBlockTri::m1(sys, mq_full, dm, nu)?;
    let step2 = gmres(
        sys,
        &b_full,
        &m1,
        &GmresOptions {
            tol: GmresTol::Absolute(target),
            maxit: cfg.maxit,
            x0: Some(&x_mid),
        },
    )?;

    let u1 = &step1.solution[..sys.n_u()];
    let mut b0_res = sys.b0.matvec(u1);
    scale(-1.0, &mut b0_res);
    axpy(1.0, &sys.g_rhs[sys.n_k()..], &mut b0_res);
    let b0_residual = norm2(&b0_res);
    let step1_target = cfg.c * cfg.eta * b_red_norm;
    let transition_bound = (step1_target.powi(2) + b0_residual.powi(2)).sqrt();
    let transition_residual = step2.residual_history[0];

    Ok(TwoStageReport {
        solution: step2.solution.clone(),
        step1,
        step2,
        transition_residual,
        step1_target,
        b0_residual,
        transition_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{
        assemble_oseen, assemble_pcd, assemble_pressure_mass, assemble_stokes, build_dof_map,
        ConvectionField, ElementPair, Problem,
    };
    use crate::krylov::{minres, MinresOptions, Operator};
    use crate::linalg::norm_inf;
    use crate::mesh::{build_cavity_mesh, build_step_mesh, ElementKind};

    #[test]
    fn chebyshev_on_identity_is_exact_after_one_step() {
        let m = CsrMatrix::identity(12);
        let cheb = ChebSgs::new(&m, None, 1).unwrap();
        assert_eq!(cheb.lambda_max(), 0.0);
        let r: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let z = cheb.solve(&r);
        for (zi, ri) in z.iter().zip(&r) {
            assert!((zi - ri).abs() < 1e-14);
        }
    }

    #[test]
    fn chebyshev_approximates_mass_solve() {
        // On a well-conditioned mass matrix 20 steps give an accurate solve.
        let mesh = build_cavity_mesh(3, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1, Problem::Cavity2d);
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let cheb = ChebSgs::new(&mq, None, 20).unwrap();
        assert!(cheb.lambda_max() > 0.0 && cheb.lambda_max() < 1.0);
        let mut rng = Lcg::new(4);
        let r = rng.vector(mq.nrows());
        let z = cheb.solve(&r);
        let mut res = mq.matvec(&z);
        axpy(-1.0, &r, &mut res);
        assert!(norm2(&res) < 1e-6 * norm2(&r));
    }

    #[test]
    fn chebyshev_respects_frame_nullspace() {
        let mesh = build_cavity_mesh(2, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1Star, Problem::Cavity2d);
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let k = dm.frame_vector().unwrap();
        let cheb = ChebSgs::new(&mq, Some(k.clone()), 20).unwrap();
        let mut rng = Lcg::new(9);
        let mut r = rng.vector(mq.nrows());
        // Consistent right-hand side.
        let c = dot(&k, &r) / dot(&k, &k);
        axpy(-c, &k, &mut r);
        let z = cheb.solve(&r);
        assert!(dot(&k, &z).abs() <= 1e-10 * norm2(&z));
        // The operator contracts the mass residual on the complement.
        let mut res = mq.matvec(&z);
        axpy(-1.0, &r, &mut res);
        assert!(norm2(&res) < 0.5 * norm2(&r));
    }

    #[test]
    fn sgs_iteration_matrix_spectrum_grows_with_level() {
        let lam: Vec<f64> = [2u32, 3, 4]
            .iter()
            .map(|&level| {
                let mesh = build_cavity_mesh(level, ElementKind::Triangle);
                let dm = build_dof_map(&mesh, ElementPair::P2P1Star, Problem::Cavity2d);
                let mq = assemble_pressure_mass(&mesh, &dm).full();
                let cheb = ChebSgs::new(&mq, dm.frame_vector(), 20).unwrap();
                cheb.lambda_max()
            })
            .collect();
        assert!(lam[1] > lam[0]);
        assert!(lam[2] > lam[1]);
    }

    #[test]
    fn jacobi_scaled_plain_mass_spectrum_stays_below_three() {
        // Spectral bound for the linear-pressure mass matrix scaled by its
        // diagonal on triangles.
        let mesh = build_cavity_mesh(3, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1, Problem::Cavity2d);
        let mq = assemble_pressure_mass(&mesh, &dm);
        let n = dm.n_k;
        let d = mq.qk.diagonal();
        let a = crate::linalg::DenseMatrix::from_fn(n, n, |i, j| mq.qk.get(i, j));
        let b = crate::linalg::DenseMatrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 });
        let eigs = crate::linalg::dense_generalized_eig(&a, &b).unwrap();
        let max = eigs.last().copied().unwrap();
        let min = eigs.first().copied().unwrap();
        assert!(min > 0.0);
        assert!(max <= 3.0 + 1e-12, "max Jacobi eigenvalue {max}");
    }

    #[test]
    fn p1_apply_on_frame_residual_returns_zero_pressure() {
        let mesh = build_cavity_mesh(2, ElementKind::Triangle);
        let (sys, dm) = assemble_stokes(&mesh, ElementPair::P2P1Star, Problem::Cavity2d);
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let p1 = StokesBlockDiag::p1(&sys, &mq, &dm).unwrap();
        let mut r = vec![0.0; sys.dim()];
        let k = dm.frame_vector().unwrap();
        r[sys.n_u()..].copy_from_slice(&k);
        let z = p1.apply(&r);
        assert!(norm_inf(&z[sys.n_u()..]) <= 1e-12);
        // A frame-direction residual is exactly the drift case.
        assert_eq!(p1.drift_warnings(), 1);
    }

    #[test]
    fn constrained_mass_solver_invariants_on_fe_matrix() {
        let mesh = build_cavity_mesh(2, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1Star, Problem::Cavity2d);
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let k = dm.frame_vector().unwrap();
        let solver = ConstrainedSolver::new(&mq, std::slice::from_ref(&k), true).unwrap();
        let mut rng = Lcg::new(123);
        for _ in 0..1000 {
            let r = rng.vector(mq.nrows());
            let (z, lam) = solver.solve_with_multipliers(&r);
            assert!(dot(&k, &z).abs() <= 1e-12 * norm2(&z).max(1.0));
            let mut res = mq.matvec(&z);
            axpy(-1.0, &r, &mut res);
            axpy(lam[0], &k, &mut res);
            assert!(norm2(&res) <= 1e-10 * norm2(&r));
        }
    }

    #[test]
    fn m1_pressure_block_is_mass_solve_at_unit_viscosity() {
        let mesh = build_step_mesh(2, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1Star, Problem::Step);
        let w = ConvectionField::zero(&dm);
        let sys = assemble_oseen(&mesh, &dm, &w, 1.0);
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let m1 = OseenBlockTri::m1(&sys, &mq, &dm, 1.0).unwrap();
        let solver = ConstrainedSolver::new(&mq, &dm.pressure_nullspace(), true).unwrap();
        let mut r = vec![0.0; sys.dim()];
        let mut rng = Lcg::new(5);
        for v in r[sys.n_u()..].iter_mut() {
            *v = rng.next_f64();
        }
        let z = m1.apply(&r);
        let expect = solver.solve(&r[sys.n_u()..]);
        for (a, b) in z[sys.n_u()..].iter().zip(&expect) {
            assert!((a + b).abs() <= 1e-12 * norm_inf(&expect).max(1.0));
        }
    }

    #[test]
    fn pcd_schur_preserves_frame_orthogonality() {
        let mesh = build_step_mesh(2, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1Star, Problem::Step);
        let w = ConvectionField::interpolate(&dm, |p| [p.y, -p.x]);
        let sys = assemble_oseen(&mesh, &dm, &w, 0.02);
        let pcd = assemble_pcd(&mesh, &dm, &w, 0.02).unwrap();
        let schur = PcdSchur::new(&pcd, &sys, &dm.pressure_nullspace()).unwrap();
        let k = dm.frame_vector().unwrap();
        let mut rng = Lcg::new(77);
        let mut r = rng.vector(sys.n_p());
        let c = dot(&k, &r) / dot(&k, &k);
        axpy(-c, &k, &mut r);
        let z = schur.inverse_apply(&r);
        assert!(dot(&k, &z).abs() <= 1e-10 * norm2(&z).max(1.0));
    }

    #[test]
    fn lsc_reduces_to_coupling_inverse_when_f_is_mass() {
        // With F = Mdiag and H = Mdiag the three factors collapse and
        // M_S^{-1} (B M^{-1} B^T x) = x on the constraint complement.
        let mesh = build_step_mesh(2, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1Star, Problem::Step);
        let (sys0, _) = assemble_stokes(&mesh, ElementPair::P2P1Star, Problem::Step);
        let m_diag = crate::assembly::velocity_mass_diagonal(&mesh, &dm);
        // Synthetic system with the mass diagonal as the velocity block.
        let n_u = sys0.n_u();
        let diag_trip: Vec<(usize, usize, f64)> =
            (0..n_u).map(|i| (i, i, m_diag[i])).collect();
        let sys = SaddleSystem {
            f_block: CsrMatrix::from_triplets(n_u, n_u, &diag_trip),
            b1: sys0.b1.clone(),
            b0: sys0.b0.clone(),
            f_rhs: vec![0.0; n_u],
            g_rhs: vec![0.0; sys0.n_p()],
            symmetric: true,
        };
        let k = dm.frame_vector().unwrap();
        let lsc = LscSchur::new(&m_diag, &sys, &dm.pressure_nullspace(), None).unwrap();
        let minv: Vec<f64> = m_diag.iter().map(|&d| 1.0 / d).collect();
        let b = stack_divergence(&sys);
        let z_mat = CsrMatrix::bdbt(&b, &minv);

        let mut rng = Lcg::new(31);
        let mut x = rng.vector(sys.n_p());
        let c = dot(&k, &x) / dot(&k, &k);
        axpy(-c, &k, &mut x);
        let zx = z_mat.matvec(&x);
        let back = lsc.inverse_apply(&zx);
        let mut err = back.clone();
        axpy(-1.0, &x, &mut err);
        assert!(
            norm2(&err) <= 1e-8 * norm2(&x),
            "cancellation error {:.3e}",
            norm2(&err)
        );
    }

    #[test]
    fn pcd_preconditioned_schur_clusters_for_stokes_limit() {
        // w = 0, plain pair, inflow/outflow problem: M_S^{-1} S should act
        // close to the identity; probe it with Rayleigh quotients over a
        // batch of random directions.
        let mesh = build_step_mesh(2, ElementKind::Triangle);
        let dm = build_dof_map(&mesh, ElementPair::P2P1, Problem::Step);
        let (sys, _) = assemble_stokes(&mesh, ElementPair::P2P1, Problem::Step);
        let nu = 1.0;
        let w = ConvectionField::zero(&dm);
        let pcd = assemble_pcd(&mesh, &dm, &w, nu).unwrap();
        let schur = PcdSchur::new(&pcd, &sys, &[]).unwrap();
        let a_fact = factorize(&sys.f_block, true).unwrap();

        let mut rng = Lcg::new(55);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..20 {
            let q = rng.vector(sys.n_p());
            // s = S q = B A^{-1} B^T q
            let btq = sys.b_transpose_apply(&q);
            let x = a_fact.solve(&btq);
            let mut s = sys.b1.matvec(&x);
            s.extend(sys.b0.matvec(&x));
            let z = schur.inverse_apply(&s);
            let rq = dot(&q, &z) / dot(&q, &q);
            lo = lo.min(rq);
            hi = hi.max(rq);
        }
        assert!(
            lo > 0.25 && hi < 2.5,
            "preconditioned Schur Rayleigh range [{lo:.3}, {hi:.3}]"
        );
    }

    #[test]
    fn p2_preconditioner_drives_minres_on_plain_taylor_hood() {
        let mesh = build_cavity_mesh(2, ElementKind::Triangle);
        let (sys, dm) = assemble_stokes(&mesh, ElementPair::P2P1, Problem::Cavity2d);
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let p2 = StokesBlockDiag::p2(&sys, &mq, &dm, 20).unwrap();
        let b = sys.rhs();
        let r = minres(&sys, &b, &p2, &MinresOptions::default()).unwrap();
        assert!(r.converged, "residuals: {:?}", r.residual_history.last());
        let res = sys.residual(&r.solution);
        assert!(norm2(&res) <= 1e-6 * norm2(&b));
    }

    #[test]
    fn two_stage_requires_enriched_space() {
        let mesh = build_step_mesh(2, ElementKind::Triangle);
        let (sys, dm) = assemble_stokes(&mesh, ElementPair::P2P1, Problem::Step);
        let w = ConvectionField::zero(&dm);
        let pcd = assemble_pcd(&mesh, &dm, &w, 1.0).unwrap();
        let mq = assemble_pressure_mass(&mesh, &dm).full();
        let r = two_stage_solve(&sys, &pcd, &mq, &dm, 1.0, &TwoStageConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn operator_dim_matches_saddle() {
        let mesh = build_step_mesh(1, ElementKind::Triangle);
        let (sys, dm) = assemble_stokes(&mesh, ElementPair::P2P1Star, Problem::Step);
        assert_eq!(Operator::dim(&sys), dm.dim());
    }
}
