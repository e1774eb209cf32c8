//! Finite element assembly for the mixed Stokes/Oseen systems.
//!
//! Velocity spaces are quadratic (P2 on triangles, Q2 on quads); the
//! continuous pressure is linear/bilinear on the same mesh. The enriched
//! pairs add one piecewise-constant pressure dof per element, specified as a
//! frame together with the continuous basis, which makes constant pressures
//! doubly represented: the assembled pressure mass matrix is singular with
//! nullspace along `k = [1; -1]` and `B^T k = 0`.
//!
//! Dirichlet velocity conditions are eliminated symmetrically in place: rows
//! and columns of constrained dofs are zeroed with a unit diagonal, and their
//! contributions move to the right-hand sides, so the assembled operators
//! keep the full velocity dimension reported alongside benchmark results.

mod elements;

use std::collections::{BTreeMap, HashMap};

pub(crate) use elements::{edge_rule, ElemGeom, RefData};

use crate::linalg::CsrMatrix;
use crate::mesh::{BoundaryTag, ElementKind, Mesh, Point2};
use crate::{Error, Result};

/// The supported velocity/pressure pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementPair {
    P2P1,
    P2P1Star,
    Q2Q1,
    Q2Q1Star,
}

impl ElementPair {
    pub fn kind(self) -> ElementKind {
        match self {
            ElementPair::P2P1 | ElementPair::P2P1Star => ElementKind::Triangle,
            ElementPair::Q2Q1 | ElementPair::Q2Q1Star => ElementKind::Quad,
        }
    }

    /// Whether the pressure space carries the piecewise-constant enrichment.
    pub fn enriched(self) -> bool {
        matches!(self, ElementPair::P2P1Star | ElementPair::Q2Q1Star)
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementPair::P2P1 => "p2p1",
            ElementPair::P2P1Star => "p2p1*",
            ElementPair::Q2Q1 => "q2q1",
            ElementPair::Q2Q1Star => "q2q1*",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p2p1" => Ok(ElementPair::P2P1),
            "p2p1*" | "p2p1star" | "p2p1s" => Ok(ElementPair::P2P1Star),
            "q2q1" => Ok(ElementPair::Q2Q1),
            "q2q1*" | "q2q1star" | "q2q1s" => Ok(ElementPair::Q2Q1Star),
            other => Err(Error::Config(format!("unknown element pair `{other}`"))),
        }
    }
}

/// Benchmark problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Problem {
    /// Driven cavity on `[-1,1]^2` (enclosed flow).
    Cavity2d,
    /// Backward-facing step with inflow at `x = -1` and natural outflow at
    /// `x = 5`.
    Step,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Cavity2d => "cavity2d",
            Problem::Step => "step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cavity2d" | "cavity" => Ok(Problem::Cavity2d),
            "step" => Ok(Problem::Step),
            other => Err(Error::Config(format!("unknown problem `{other}`"))),
        }
    }

    /// Enclosed flow means every boundary dof is constrained, which leaves
    /// the hydrostatic pressure mode in the assembled system.
    pub fn enclosed(self) -> bool {
        matches!(self, Problem::Cavity2d)
    }
}

/// Dirichlet data for a boundary point, or `None` where the boundary
/// condition is natural.
pub fn boundary_profile(problem: Problem, tag: BoundaryTag, p: Point2) -> Option<[f64; 2]> {
    match (problem, tag) {
        (Problem::Cavity2d, BoundaryTag::Lid) => {
            // Tangential lid velocity 1 - x^4, zero at the corners.
            Some([1.0 - p.x.powi(4), 0.0])
        }
        (Problem::Cavity2d, _) => Some([0.0, 0.0]),
        (Problem::Step, BoundaryTag::Inflow) => Some([4.0 * p.y * (1.0 - p.y), 0.0]),
        (Problem::Step, BoundaryTag::Outflow) => None,
        (Problem::Step, _) => Some([0.0, 0.0]),
    }
}

/// Degree-of-freedom bookkeeping for one discretised problem.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub pair: ElementPair,
    pub problem: Problem,
    /// Scalar velocity nodes; velocity dofs are `comp * n_vnodes + node`.
    pub n_vnodes: usize,
    /// Continuous pressure dofs (mesh vertices).
    pub n_k: usize,
    /// Piecewise-constant pressure dofs (elements; zero when not enriched).
    pub n_0: usize,
    pub vnode_coords: Vec<Point2>,
    elem_vnodes: Vec<usize>,
    nodes_per_elem: usize,
    /// Constrained velocity dofs with their prescribed values, ascending.
    pub dirichlet: Vec<(usize, f64)>,
    dirichlet_value: Vec<f64>,
    dirichlet_mask: Vec<bool>,
}

impl DofMap {
    pub fn n_u(&self) -> usize {
        2 * self.n_vnodes
    }

    pub fn n_p(&self) -> usize {
        self.n_k + self.n_0
    }

    /// Total saddle system dimension.
    pub fn dim(&self) -> usize {
        self.n_u() + self.n_p()
    }

    pub fn dof(&self, comp: usize, node: usize) -> usize {
        comp * self.n_vnodes + node
    }

    pub fn element_vnodes(&self, e: usize) -> &[usize] {
        &self.elem_vnodes[e * self.nodes_per_elem..(e + 1) * self.nodes_per_elem]
    }

    pub fn is_dirichlet(&self, dof: usize) -> bool {
        self.dirichlet_mask[dof]
    }

    pub fn dirichlet_value(&self, dof: usize) -> f64 {
        self.dirichlet_value[dof]
    }

    /// The frame redundancy vector `k = [1_{n_k}; -1_{n_0}]`, present only
    /// for enriched pairs.
    pub fn frame_vector(&self) -> Option<Vec<f64>> {
        if self.n_0 == 0 {
            return None;
        }
        let mut k = vec![1.0; self.n_p()];
        for v in k[self.n_k..].iter_mut() {
            *v = -1.0;
        }
        Some(k)
    }

    /// Basis of the pressure nullspace of the assembled saddle matrix:
    /// `span{k}` for enriched pairs, plus the constant mode for enclosed
    /// flow. For enclosed enriched problems the equivalent basis
    /// `{[1;0], [0;1]}` is returned.
    pub fn pressure_nullspace(&self) -> Vec<Vec<f64>> {
        let np = self.n_p();
        match (self.pair.enriched(), self.problem.enclosed()) {
            (false, false) => Vec::new(),
            (false, true) => vec![vec![1.0; np]],
            (true, false) => vec![self.frame_vector().unwrap()],
            (true, true) => {
                let mut c1 = vec![0.0; np];
                let mut c0 = vec![0.0; np];
                for v in c1[..self.n_k].iter_mut() {
                    *v = 1.0;
                }
                for v in c0[self.n_k..].iter_mut() {
                    *v = 1.0;
                }
                vec![c1, c0]
            }
        }
    }

    /// The same vectors embedded in the full `[u; p]` space.
    pub fn system_nullspace(&self) -> Vec<Vec<f64>> {
        self.pressure_nullspace()
            .into_iter()
            .map(|p| {
                let mut w = vec![0.0; self.dim()];
                w[self.n_u()..].copy_from_slice(&p);
                w
            })
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn zero_dirichlet(&mut self) {
        for (_, v) in self.dirichlet.iter_mut() {
            *v = 0.0;
        }
        for v in self.dirichlet_value.iter_mut() {
            *v = 0.0;
        }
    }
}

/// Build the dof map for a mesh/pair/problem triple, including the Dirichlet
/// set implied by the problem's boundary profile.
pub fn build_dof_map(mesh: &Mesh, pair: ElementPair, problem: Problem) -> DofMap {
    assert_eq!(
        mesh.element_kind,
        pair.kind(),
        "element pair {:?} does not match mesh kind {:?}",
        pair,
        mesh.element_kind
    );
    let n_vertices = mesh.n_vertices();

    // Unique mesh edges carry the quadratic mid-side nodes; ordering is
    // lexicographic by midpoint (y, x) so numbering is reproducible.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for e in 0..mesh.n_elements() {
        let vs = mesh.element(e);
        for i in 0..vs.len() {
            let a = vs[i];
            let b = vs[(i + 1) % vs.len()];
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let midpoint = |&(a, b): &(usize, usize)| {
        let p = mesh.vertices[a];
        let q = mesh.vertices[b];
        Point2::new(0.5 * (p.x + q.x), 0.5 * (p.y + q.y))
    };
    edges.sort_by(|ea, eb| {
        let pa = midpoint(ea);
        let pb = midpoint(eb);
        (pa.y, pa.x).partial_cmp(&(pb.y, pb.x)).unwrap()
    });
    let edge_node: HashMap<(usize, usize), usize> = edges
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, n_vertices + i))
        .collect();

    let kind = mesh.element_kind;
    let with_centers = kind == ElementKind::Quad;
    let n_vnodes = n_vertices + edges.len() + if with_centers { mesh.n_elements() } else { 0 };

    let mut vnode_coords = mesh.vertices.clone();
    vnode_coords.extend(edges.iter().map(midpoint));
    if with_centers {
        vnode_coords.extend((0..mesh.n_elements()).map(|e| mesh.element_centroid(e)));
    }

    let nodes_per_elem = match kind {
        ElementKind::Triangle => 6,
        ElementKind::Quad => 9,
    };
    let mut elem_vnodes = Vec::with_capacity(nodes_per_elem * mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let vs = mesh.element(e);
        elem_vnodes.extend_from_slice(vs);
        for i in 0..vs.len() {
            let a = vs[i];
            let b = vs[(i + 1) % vs.len()];
            elem_vnodes.push(edge_node[&(a.min(b), a.max(b))]);
        }
        if with_centers {
            elem_vnodes.push(n_vertices + edges.len() + e);
        }
    }

    // Dirichlet velocity dofs: every velocity node lying on a tagged
    // boundary edge whose profile prescribes a value. Values from different
    // edges meeting at a node must agree (profiles vanish at corners).
    let mut dirichlet_map: BTreeMap<usize, f64> = BTreeMap::new();
    for be in &mesh.boundary_edges {
        let mid = edge_node[&(be.v0.min(be.v1), be.v0.max(be.v1))];
        for node in [be.v0, be.v1, mid] {
            let p = vnode_coords[node];
            if let Some(vals) = boundary_profile(problem, be.tag, p) {
                for comp in 0..2 {
                    let dof = comp * n_vnodes + node;
                    if let Some(prev) = dirichlet_map.insert(dof, vals[comp]) {
                        debug_assert!(
                            (prev - vals[comp]).abs() < 1e-12,
                            "conflicting boundary values at node {node}"
                        );
                    }
                }
            }
        }
    }
    let dirichlet: Vec<(usize, f64)> = dirichlet_map.into_iter().collect();
    let n_u = 2 * n_vnodes;
    let mut dirichlet_value = vec![0.0; n_u];
    let mut dirichlet_mask = vec![false; n_u];
    for &(d, v) in &dirichlet {
        dirichlet_value[d] = v;
        dirichlet_mask[d] = true;
    }

    DofMap {
        pair,
        problem,
        n_vnodes,
        n_k: n_vertices,
        n_0: if pair.enriched() { mesh.n_elements() } else { 0 },
        vnode_coords,
        elem_vnodes,
        nodes_per_elem,
        dirichlet,
        dirichlet_value,
        dirichlet_mask,
    }
}

/// Coefficient vector of a discrete velocity field used as the convection
/// wind in Oseen operators.
#[derive(Clone, Debug)]
pub struct ConvectionField(Vec<f64>);

impl ConvectionField {
    pub fn new(dm: &DofMap, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != dm.n_u() {
            return Err(Error::Dimension(format!(
                "convection field has {} coefficients, expected {}",
                coeffs.len(),
                dm.n_u()
            )));
        }
        Ok(ConvectionField(coeffs))
    }

    pub fn zero(dm: &DofMap) -> Self {
        ConvectionField(vec![0.0; dm.n_u()])
    }

    /// Interpolate a pointwise field at the velocity nodes.
    pub fn interpolate(dm: &DofMap, f: impl Fn(Point2) -> [f64; 2]) -> Self {
        let mut coeffs = vec![0.0; dm.n_u()];
        for (node, &p) in dm.vnode_coords.iter().enumerate() {
            let v = f(p);
            coeffs[dm.dof(0, node)] = v[0];
            coeffs[dm.dof(1, node)] = v[1];
        }
        ConvectionField(coeffs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Assembled saddle-point system
/// `[[F, B^T], [B, 0]] [u; p] = [f; g]` with `B = [B1; B0]`.
#[derive(Clone, Debug)]
pub struct SaddleSystem {
    /// Velocity block: the vector Laplacian for Stokes, `nu A + N(w)` for
    /// Oseen, with unit rows/columns at Dirichlet dofs.
    pub f_block: CsrMatrix,
    /// Divergence rows of the continuous pressure space (`n_k x n_u`).
    pub b1: CsrMatrix,
    /// Divergence rows of the element pressure space (`n_0 x n_u`).
    pub b0: CsrMatrix,
    pub f_rhs: Vec<f64>,
    pub g_rhs: Vec<f64>,
    pub symmetric: bool,
}

impl SaddleSystem {
    pub fn n_u(&self) -> usize {
        self.f_block.nrows()
    }

    pub fn n_k(&self) -> usize {
        self.b1.nrows()
    }

    pub fn n_0(&self) -> usize {
        self.b0.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.n_k() + self.n_0()
    }

    pub fn dim(&self) -> usize {
        self.n_u() + self.n_p()
    }

    /// Stacked right-hand side `[f; g]`.
    pub fn rhs(&self) -> Vec<f64> {
        let mut b = self.f_rhs.clone();
        b.extend_from_slice(&self.g_rhs);
        b
    }

    /// `y = [[F, B^T], [B, 0]] x` on the stacked vector.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let n_u = self.n_u();
        let (xu, xp) = x.split_at(n_u);
        let (xp1, xp0) = xp.split_at(self.n_k());
        {
            let (yu, yp) = y.split_at_mut(n_u);
            self.f_block.matvec_into(xu, yu);
            self.b1.tr_matvec_add(1.0, xp1, yu);
            self.b0.tr_matvec_add(1.0, xp0, yu);
            let (yp1, yp0) = yp.split_at_mut(self.n_k());
            self.b1.matvec_into(xu, yp1);
            self.b0.matvec_into(xu, yp0);
        }
    }

    /// `B^T p` over the full pressure vector.
    pub fn b_transpose_apply(&self, p: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_u()];
        let (p1, p0) = p.split_at(self.n_k());
        self.b1.tr_matvec_add(1.0, p1, &mut y);
        self.b0.tr_matvec_add(1.0, p0, &mut y);
        y
    }

    /// Residual `[f; g] - [[F, B^T], [B, 0]] x`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut ax = vec![0.0; self.dim()];
        self.apply_into(x, &mut ax);
        let b = self.rhs();
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    }

    /// Drop the element-pressure rows, leaving the plain Taylor-Hood system
    /// `[[F, B1^T], [B1, 0]]` with right-hand side `[f; g1]`.
    pub fn reduced(&self) -> SaddleSystem {
        SaddleSystem {
            f_block: self.f_block.clone(),
            b1: self.b1.clone(),
            b0: CsrMatrix::from_triplets(0, self.n_u(), &[]),
            f_rhs: self.f_rhs.clone(),
            g_rhs: self.g_rhs[..self.n_k()].to_vec(),
            symmetric: self.symmetric,
        }
    }
}

/// The 2x2-block pressure mass matrix of the enriched space.
///
/// `full()` assembles `[[Qk, R^T], [R, Q0]]`; by the frame redundancy it is
/// symmetric positive semidefinite with nullspace `span{k}`.
#[derive(Clone, Debug)]
pub struct PressureMassBlocks {
    /// Continuous pressure mass (`n_k x n_k`).
    pub qk: CsrMatrix,
    /// Cross terms (`n_0 x n_k`).
    pub r: CsrMatrix,
    /// Element pressure mass: the diagonal of element areas.
    pub q0: Vec<f64>,
}

impl PressureMassBlocks {
    pub fn n_k(&self) -> usize {
        self.qk.nrows()
    }

    pub fn n_0(&self) -> usize {
        self.q0.len()
    }

    pub fn n_p(&self) -> usize {
        self.n_k() + self.n_0()
    }

    pub fn full(&self) -> CsrMatrix {
        let n_k = self.n_k();
        let n_p = self.n_p();
        let mut trip: Vec<(usize, usize, f64)> = self.qk.iter().collect();
        for (i, j, v) in self.r.iter() {
            trip.push((n_k + i, j, v));
            trip.push((j, n_k + i, v));
        }
        for (i, &v) in self.q0.iter().enumerate() {
            trip.push((n_k + i, n_k + i, v));
        }
        CsrMatrix::from_triplets(n_p, n_p, &trip)
    }
}

/// Operators for pressure convection-diffusion preconditioning.
#[derive(Clone, Debug)]
pub struct PcdOperators {
    /// Consistent continuous-pressure mass matrix.
    pub q1: CsrMatrix,
    /// Continuous-pressure convection-diffusion matrix.
    pub f1: CsrMatrix,
    /// Element-pressure mass diagonal (areas).
    pub q0: Vec<f64>,
    /// Element-pressure convection-diffusion matrix from the face-jump
    /// stencil (`n_0 x n_0`).
    pub f0: CsrMatrix,
    /// Diagonal of the velocity mass matrix.
    pub m_diag: Vec<f64>,
}

/// Assemble the Stokes system (unit viscosity) and its dof map.
pub fn assemble_stokes(
    mesh: &Mesh,
    pair: ElementPair,
    problem: Problem,
) -> (SaddleSystem, DofMap) {
    let dm = build_dof_map(mesh, pair, problem);
    let sys = assemble_saddle(mesh, &dm, 1.0, None);
    (sys, dm)
}

/// Assemble the Oseen system `F = nu A + N(w)` with the divergence blocks of
/// the Stokes problem.
pub fn assemble_oseen(mesh: &Mesh, dm: &DofMap, w: &ConvectionField, nu: f64) -> SaddleSystem {
    assert!(nu > 0.0, "viscosity must be positive");
    assert_eq!(w.as_slice().len(), dm.n_u());
    assemble_saddle(mesh, dm, nu, Some(w.as_slice()))
}

fn assemble_saddle(mesh: &Mesh, dm: &DofMap, nu: f64, wind: Option<&[f64]>) -> SaddleSystem {
    let refdata = RefData::for_kind(mesh.element_kind);
    let nv = refdata.n_vel;
    let np = refdata.n_p;
    let nq = refdata.points.len();
    let n_u = dm.n_u();
    let enriched = dm.n_0 > 0;

    let mut f_trip: Vec<(usize, usize, f64)> = Vec::with_capacity(mesh.n_elements() * 4 * nv * nv);
    let mut b1_trip: Vec<(usize, usize, f64)> = Vec::with_capacity(mesh.n_elements() * 2 * np * nv);
    let mut b0_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut f_rhs = vec![0.0; n_u];
    let mut g_rhs = vec![0.0; dm.n_p()];

    let mut gphys = vec![[0.0f64; 2]; nv];
    for e in 0..mesh.n_elements() {
        let geom = ElemGeom::from_mesh(mesh, e);
        let vnodes = dm.element_vnodes(e);
        let pnodes = mesh.element(e);

        let mut lap = [[0.0f64; 9]; 9];
        let mut conv = [[0.0f64; 9]; 9];
        let mut b1l = [[[0.0f64; 2]; 9]; 4];
        let mut b0l = [[0.0f64; 2]; 9];

        for q in 0..nq {
            let [xi, eta] = refdata.points[q];
            let (jac, det) = geom.jacobian(xi, eta);
            let wq = refdata.weights[q] * det;
            let vals = &refdata.vel_vals[q];
            for (i, g) in refdata.vel_grads[q][..nv].iter().enumerate() {
                gphys[i] = elements::physical_grad(&jac, det, *g);
            }
            let (wx, wy) = match wind {
                None => (0.0, 0.0),
                Some(w) => {
                    let mut wx = 0.0;
                    let mut wy = 0.0;
                    for (i, &gn) in vnodes.iter().enumerate() {
                        wx += w[dm.dof(0, gn)] * vals[i];
                        wy += w[dm.dof(1, gn)] * vals[i];
                    }
                    (wx, wy)
                }
            };
            for i in 0..nv {
                for j in 0..nv {
                    lap[i][j] += wq * (gphys[i][0] * gphys[j][0] + gphys[i][1] * gphys[j][1]);
                }
            }
            if wind.is_some() {
                for i in 0..nv {
                    let vi = wq * vals[i];
                    for j in 0..nv {
                        conv[i][j] += vi * (wx * gphys[j][0] + wy * gphys[j][1]);
                    }
                }
            }
            let pvals = &refdata.p_vals[q];
            for p in 0..np {
                let pv = wq * pvals[p];
                for j in 0..nv {
                    b1l[p][j][0] -= pv * gphys[j][0];
                    b1l[p][j][1] -= pv * gphys[j][1];
                }
            }
            if enriched {
                for j in 0..nv {
                    b0l[j][0] -= wq * gphys[j][0];
                    b0l[j][1] -= wq * gphys[j][1];
                }
            }
        }

        // Scatter with symmetric Dirichlet elimination: constrained rows are
        // dropped, constrained columns move to the right-hand sides.
        for i in 0..nv {
            for c in 0..2 {
                let row = dm.dof(c, vnodes[i]);
                if dm.is_dirichlet(row) {
                    continue;
                }
                for j in 0..nv {
                    let v = nu * lap[i][j] + conv[i][j];
                    if v == 0.0 {
                        continue;
                    }
                    let col = dm.dof(c, vnodes[j]);
                    if dm.is_dirichlet(col) {
                        f_rhs[row] -= v * dm.dirichlet_value(col);
                    } else {
                        f_trip.push((row, col, v));
                    }
                }
            }
        }
        for p in 0..np {
            let row = pnodes[p];
            for j in 0..nv {
                for c in 0..2 {
                    let v = b1l[p][j][c];
                    if v == 0.0 {
                        continue;
                    }
                    let col = dm.dof(c, vnodes[j]);
                    if dm.is_dirichlet(col) {
                        g_rhs[row] -= v * dm.dirichlet_value(col);
                    } else {
                        b1_trip.push((row, col, v));
                    }
                }
            }
        }
        if enriched {
            for j in 0..nv {
                for c in 0..2 {
                    let v = b0l[j][c];
                    if v == 0.0 {
                        continue;
                    }
                    let col = dm.dof(c, vnodes[j]);
                    if dm.is_dirichlet(col) {
                        g_rhs[dm.n_k + e] -= v * dm.dirichlet_value(col);
                    } else {
                        b0_trip.push((e, col, v));
                    }
                }
            }
        }
    }

    for &(d, val) in &dm.dirichlet {
        f_trip.push((d, d, 1.0));
        f_rhs[d] = val;
    }

    SaddleSystem {
        f_block: CsrMatrix::from_triplets(n_u, n_u, &f_trip),
        b1: CsrMatrix::from_triplets(dm.n_k, n_u, &b1_trip),
        b0: CsrMatrix::from_triplets(dm.n_0, n_u, &b0_trip),
        f_rhs,
        g_rhs,
        symmetric: wind.is_none(),
    }
}

/// Assemble the pressure mass blocks (no boundary conditions apply to the
/// pressure space).
pub fn assemble_pressure_mass(mesh: &Mesh, dm: &DofMap) -> PressureMassBlocks {
    let refdata = RefData::for_kind(mesh.element_kind);
    let np = refdata.n_p;
    let nq = refdata.points.len();
    let enriched = dm.n_0 > 0;

    let mut qk_trip = Vec::with_capacity(mesh.n_elements() * np * np);
    let mut r_trip = Vec::new();
    let mut q0 = vec![0.0; dm.n_0];

    for e in 0..mesh.n_elements() {
        let geom = ElemGeom::from_mesh(mesh, e);
        let pnodes = mesh.element(e);
        let mut mass = [[0.0f64; 4]; 4];
        let mut row = [0.0f64; 4];
        let mut area = 0.0;
        for q in 0..nq {
            let [xi, eta] = refdata.points[q];
            let (_, det) = geom.jacobian(xi, eta);
            let wq = refdata.weights[q] * det;
            let pvals = &refdata.p_vals[q];
            for i in 0..np {
                let vi = wq * pvals[i];
                row[i] += vi;
                for j in 0..np {
                    mass[i][j] += vi * pvals[j];
                }
            }
            area += wq;
        }
        for i in 0..np {
            for j in 0..np {
                qk_trip.push((pnodes[i], pnodes[j], mass[i][j]));
            }
        }
        if enriched {
            for i in 0..np {
                r_trip.push((e, pnodes[i], row[i]));
            }
            q0[e] = area;
        }
    }

    PressureMassBlocks {
        qk: CsrMatrix::from_triplets(dm.n_k, dm.n_k, &qk_trip),
        r: CsrMatrix::from_triplets(dm.n_0, dm.n_k, &r_trip),
        q0,
    }
}

/// Assemble the pressure convection-diffusion operators.
///
/// `f1` is the Galerkin convection-diffusion matrix on the continuous
/// pressure space. `f0` acts on the element pressures and is built from the
/// inter-element jump stencil: a two-cell diffusion stencil
/// `nu |e| / h_e [[1, -1], [-1, 1]]` per interior face (with `h_e` the
/// centroid distance) plus upwinded convective fluxes `int_e w . n`, so mass
/// leaving one cell enters its neighbour. Outflow boundary faces add their
/// outgoing flux to the diagonal.
pub fn assemble_pcd(
    mesh: &Mesh,
    dm: &DofMap,
    w: &ConvectionField,
    nu: f64,
) -> Result<PcdOperators> {
    let refdata = RefData::for_kind(mesh.element_kind);
    let np = refdata.n_p;
    let nq = refdata.points.len();
    let enriched = dm.n_0 > 0;
    if enriched && mesh.interior_faces.is_empty() && mesh.n_elements() > 1 {
        return Err(Error::Topology(
            "face topology required for the element-pressure operators".into(),
        ));
    }

    let wind = w.as_slice();
    let mut f1_trip = Vec::with_capacity(mesh.n_elements() * np * np);
    let mut q1_trip = Vec::with_capacity(mesh.n_elements() * np * np);
    let mut m_diag = vec![0.0; dm.n_u()];
    let mut q0 = vec![0.0; dm.n_0];

    let mut gp = vec![[0.0f64; 2]; np];
    for e in 0..mesh.n_elements() {
        let geom = ElemGeom::from_mesh(mesh, e);
        let vnodes = dm.element_vnodes(e);
        let pnodes = mesh.element(e);
        let mut f1l = [[0.0f64; 4]; 4];
        let mut q1l = [[0.0f64; 4]; 4];
        let mut area = 0.0;
        for q in 0..nq {
            let [xi, eta] = refdata.points[q];
            let (jac, det) = geom.jacobian(xi, eta);
            let wq = refdata.weights[q] * det;
            let pvals = &refdata.p_vals[q];
            for (i, g) in refdata.p_grads[q][..np].iter().enumerate() {
                gp[i] = elements::physical_grad(&jac, det, *g);
            }
            let vals = &refdata.vel_vals[q];
            let mut wx = 0.0;
            let mut wy = 0.0;
            for (i, &gn) in vnodes.iter().enumerate() {
                wx += wind[dm.dof(0, gn)] * vals[i];
                wy += wind[dm.dof(1, gn)] * vals[i];
            }
            for i in 0..np {
                for j in 0..np {
                    f1l[i][j] += wq
                        * (nu * (gp[i][0] * gp[j][0] + gp[i][1] * gp[j][1])
                            + (wx * gp[j][0] + wy * gp[j][1]) * pvals[i]);
                    q1l[i][j] += wq * pvals[i] * pvals[j];
                }
            }
            for (i, &gn) in vnodes.iter().enumerate() {
                let contrib = wq * vals[i] * vals[i];
                m_diag[dm.dof(0, gn)] += contrib;
                m_diag[dm.dof(1, gn)] += contrib;
            }
            area += wq;
        }
        for i in 0..np {
            for j in 0..np {
                f1_trip.push((pnodes[i], pnodes[j], f1l[i][j]));
                q1_trip.push((pnodes[i], pnodes[j], q1l[i][j]));
            }
        }
        if enriched {
            q0[e] = area;
        }
    }

    // Element-pressure convection-diffusion from face jumps.
    let mut f0_trip: Vec<(usize, usize, f64)> = Vec::new();
    if enriched {
        let (ts, tw) = edge_rule();
        for face in &mesh.interior_faces {
            let (a, b) = (face.elem_a, face.elem_b);
            let ca = mesh.element_centroid(a);
            let cb = mesh.element_centroid(b);
            let h_e = (cb.x - ca.x).hypot(cb.y - ca.y);
            let d = nu * face.length / h_e;
            f0_trip.push((a, a, d));
            f0_trip.push((a, b, -d));
            f0_trip.push((b, a, -d));
            f0_trip.push((b, b, d));

            let q_e = face_flux(mesh, dm, wind, a, face.v0, face.v1, face.normal, &ts, &tw);
            if q_e >= 0.0 {
                // Upwind cell is `a`: flux q_e leaves a and enters b.
                f0_trip.push((a, a, q_e));
                f0_trip.push((b, a, -q_e));
            } else {
                f0_trip.push((a, b, q_e));
                f0_trip.push((b, b, -q_e));
            }
        }
        for be in &mesh.boundary_edges {
            if be.tag != BoundaryTag::Outflow {
                continue;
            }
            let p = mesh.vertices[be.v0];
            let q = mesh.vertices[be.v1];
            let (dx, dy) = (q.x - p.x, q.y - p.y);
            let len = dx.hypot(dy);
            let normal = [dy / len, -dx / len];
            let q_e = face_flux(mesh, dm, wind, be.elem, be.v0, be.v1, normal, &ts, &tw);
            if q_e > 0.0 {
                f0_trip.push((be.elem, be.elem, q_e));
            }
        }
    }

    Ok(PcdOperators {
        q1: CsrMatrix::from_triplets(dm.n_k, dm.n_k, &q1_trip),
        f1: CsrMatrix::from_triplets(dm.n_k, dm.n_k, &f1_trip),
        q0,
        f0: CsrMatrix::from_triplets(dm.n_0, dm.n_0, &f0_trip),
        m_diag,
    })
}

/// `int_e w . n` over the edge (v0, v1) of element `elem`.
#[allow(clippy::too_many_arguments)]
fn face_flux(
    mesh: &Mesh,
    dm: &DofMap,
    wind: &[f64],
    elem: usize,
    v0: usize,
    v1: usize,
    normal: [f64; 2],
    ts: &[f64; 3],
    tw: &[f64; 3],
) -> f64 {
    let geom = ElemGeom::from_mesh(mesh, elem);
    let vnodes = dm.element_vnodes(elem);
    let p0 = mesh.vertices[v0];
    let p1 = mesh.vertices[v1];
    let len = (p1.x - p0.x).hypot(p1.y - p0.y);
    let mut flux = 0.0;
    for (t, wt) in ts.iter().zip(tw) {
        let pt = Point2::new(p0.x + t * (p1.x - p0.x), p0.y + t * (p1.y - p0.y));
        let [xi, eta] = geom.inverse_map(pt);
        let vals = elements_velocity_values(mesh.element_kind, xi, eta);
        let mut wx = 0.0;
        let mut wy = 0.0;
        for (i, &gn) in vnodes.iter().enumerate() {
            wx += wind[dm.dof(0, gn)] * vals[i];
            wy += wind[dm.dof(1, gn)] * vals[i];
        }
        flux += wt * (wx * normal[0] + wy * normal[1]);
    }
    flux * len
}

fn elements_velocity_values(kind: ElementKind, xi: f64, eta: f64) -> [f64; 9] {
    elements::velocity_basis(kind, xi, eta)
}

/// Diagonal of the velocity mass matrix alone (no wind needed).
pub fn velocity_mass_diagonal(mesh: &Mesh, dm: &DofMap) -> Vec<f64> {
    let refdata = RefData::for_kind(mesh.element_kind);
    let nq = refdata.points.len();
    let mut m_diag = vec![0.0; dm.n_u()];
    for e in 0..mesh.n_elements() {
        let geom = ElemGeom::from_mesh(mesh, e);
        let vnodes = dm.element_vnodes(e);
        for q in 0..nq {
            let [xi, eta] = refdata.points[q];
            let (_, det) = geom.jacobian(xi, eta);
            let wq = refdata.weights[q] * det;
            let vals = &refdata.vel_vals[q];
            for (i, &gn) in vnodes.iter().enumerate() {
                let contrib = wq * vals[i] * vals[i];
                m_diag[dm.dof(0, gn)] += contrib;
                m_diag[dm.dof(1, gn)] += contrib;
            }
        }
    }
    m_diag
}

/// Per-element divergence moments of a velocity coefficient vector:
/// `(int_T div u, int_T (div u)^2)`.
pub fn element_divergence_moments(mesh: &Mesh, dm: &DofMap, u: &[f64]) -> Vec<(f64, f64)> {
    assert_eq!(u.len(), dm.n_u());
    let refdata = RefData::for_kind(mesh.element_kind);
    let nv = refdata.n_vel;
    let nq = refdata.points.len();
    let mut out = Vec::with_capacity(mesh.n_elements());
    let mut gphys = vec![[0.0f64; 2]; nv];
    for e in 0..mesh.n_elements() {
        let geom = ElemGeom::from_mesh(mesh, e);
        let vnodes = dm.element_vnodes(e);
        let mut mean = 0.0;
        let mut sq = 0.0;
        for q in 0..nq {
            let [xi, eta] = refdata.points[q];
            let (jac, det) = geom.jacobian(xi, eta);
            let wq = refdata.weights[q] * det;
            for (i, g) in refdata.vel_grads[q][..nv].iter().enumerate() {
                gphys[i] = elements::physical_grad(&jac, det, *g);
            }
            let mut div = 0.0;
            for (i, &gn) in vnodes.iter().enumerate() {
                div += u[dm.dof(0, gn)] * gphys[i][0] + u[dm.dof(1, gn)] * gphys[i][1];
            }
            mean += wq * div;
            sq += wq * div * div;
        }
        out.push((mean, sq));
    }
    out
}
