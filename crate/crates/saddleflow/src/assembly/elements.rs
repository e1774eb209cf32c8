//! Reference elements and quadrature.
//!
//! Triangles use a 7-point degree-5 rule and quadrilaterals a 4x4 tensor
//! Gauss rule, so every integrand that occurs here (including the degree-5
//! convection products) is integrated exactly on affine element maps.

use crate::mesh::{ElementKind, Mesh, Point2};

pub const MAX_VEL_NODES: usize = 9;
pub const MAX_P_NODES: usize = 4;

/// Basis values and reference gradients tabulated at quadrature points.
pub struct RefData {
    pub points: Vec<[f64; 2]>,
    /// Reference weights; `sum(weights) = reference element measure`.
    pub weights: Vec<f64>,
    pub n_vel: usize,
    pub n_p: usize,
    pub vel_vals: Vec<[f64; MAX_VEL_NODES]>,
    pub vel_grads: Vec<[[f64; 2]; MAX_VEL_NODES]>,
    pub p_vals: Vec<[f64; MAX_P_NODES]>,
    pub p_grads: Vec<[[f64; 2]; MAX_P_NODES]>,
}

impl RefData {
    pub fn for_kind(kind: ElementKind) -> RefData {
        let (points, weights) = match kind {
            ElementKind::Triangle => triangle_rule(),
            ElementKind::Quad => quad_rule(),
        };
        let (n_vel, n_p) = match kind {
            ElementKind::Triangle => (6, 3),
            ElementKind::Quad => (9, 4),
        };
        let mut data = RefData {
            points,
            weights,
            n_vel,
            n_p,
            vel_vals: Vec::new(),
            vel_grads: Vec::new(),
            p_vals: Vec::new(),
            p_grads: Vec::new(),
        };
        for q in 0..data.points.len() {
            let [xi, eta] = data.points[q];
            data.vel_vals.push(velocity_basis(kind, xi, eta));
            data.vel_grads.push(velocity_basis_grad(kind, xi, eta));
            data.p_vals.push(pressure_basis(kind, xi, eta));
            data.p_grads.push(pressure_basis_grad(kind, xi, eta));
        }
        data
    }
}

/// 7-point degree-5 rule on the reference triangle (0,0)-(1,0)-(0,1);
/// weights sum to the reference area 1/2.
fn triangle_rule() -> (Vec<[f64; 2]>, Vec<f64>) {
    let s15 = 15.0f64.sqrt();
    let a1 = (6.0 - s15) / 21.0;
    let a2 = (6.0 + s15) / 21.0;
    let w0 = 9.0 / 40.0;
    let w1 = (155.0 - s15) / 1200.0;
    let w2 = (155.0 + s15) / 1200.0;
    // Barycentric orbits (l1, l2, l3) mapped to (xi, eta) = (l2, l3).
    let mut pts = vec![[1.0 / 3.0, 1.0 / 3.0]];
    let mut wts = vec![w0 / 2.0];
    for (a, w) in [(a1, w1), (a2, w2)] {
        let b = 1.0 - 2.0 * a;
        for bary in [[a, a, b], [a, b, a], [b, a, a]] {
            pts.push([bary[1], bary[2]]);
            wts.push(w / 2.0);
        }
    }
    (pts, wts)
}

/// 4x4 tensor Gauss rule on [-1,1]^2 (degree 7 per direction); weights sum
/// to the reference area 4.
fn quad_rule() -> (Vec<[f64; 2]>, Vec<f64>) {
    let (nodes, weights) = gauss4();
    let mut pts = Vec::with_capacity(16);
    let mut wts = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            pts.push([nodes[i], nodes[j]]);
            wts.push(weights[i] * weights[j]);
        }
    }
    (pts, wts)
}

fn gauss4() -> ([f64; 4], [f64; 4]) {
    let t = (6.0f64 / 5.0).sqrt();
    let a = ((3.0 - 2.0 * t) / 7.0).sqrt();
    let b = ((3.0 + 2.0 * t) / 7.0).sqrt();
    let s30 = 30.0f64.sqrt();
    let wa = (18.0 + s30) / 36.0;
    let wb = (18.0 - s30) / 36.0;
    ([-b, -a, a, b], [wb, wa, wa, wb])
}

/// 3-point Gauss rule on [0,1] (degree 5), for edge integrals; weights sum
/// to 1.
pub fn edge_rule() -> ([f64; 3], [f64; 3]) {
    let s = (3.0f64 / 5.0).sqrt();
    (
        [0.5 * (1.0 - s), 0.5, 0.5 * (1.0 + s)],
        [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0],
    )
}

pub(crate) fn velocity_basis(kind: ElementKind, xi: f64, eta: f64) -> [f64; MAX_VEL_NODES] {
    let mut out = [0.0; MAX_VEL_NODES];
    match kind {
        ElementKind::Triangle => {
            // P2 on [v0, v1, v2, m01, m12, m20].
            let l = [1.0 - xi - eta, xi, eta];
            for i in 0..3 {
                out[i] = l[i] * (2.0 * l[i] - 1.0);
            }
            out[3] = 4.0 * l[0] * l[1];
            out[4] = 4.0 * l[1] * l[2];
            out[5] = 4.0 * l[2] * l[0];
        }
        ElementKind::Quad => {
            // Q2 on [v0..v3, m01, m12, m23, m30, center].
            let lx = quadratic_1d(xi);
            let ly = quadratic_1d(eta);
            out[0] = lx.0 * ly.0;
            out[1] = lx.2 * ly.0;
            out[2] = lx.2 * ly.2;
            out[3] = lx.0 * ly.2;
            out[4] = lx.1 * ly.0;
            out[5] = lx.2 * ly.1;
            out[6] = lx.1 * ly.2;
            out[7] = lx.0 * ly.1;
            out[8] = lx.1 * ly.1;
        }
    }
    out
}

fn velocity_basis_grad(kind: ElementKind, xi: f64, eta: f64) -> [[f64; 2]; MAX_VEL_NODES] {
    let mut out = [[0.0; 2]; MAX_VEL_NODES];
    match kind {
        ElementKind::Triangle => {
            let l = [1.0 - xi - eta, xi, eta];
            let dl = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
            for i in 0..3 {
                for c in 0..2 {
                    out[i][c] = (4.0 * l[i] - 1.0) * dl[i][c];
                }
            }
            let pairs = [(0usize, 1usize), (1, 2), (2, 0)];
            for (m, (i, j)) in pairs.iter().enumerate() {
                for c in 0..2 {
                    out[3 + m][c] = 4.0 * (l[*i] * dl[*j][c] + l[*j] * dl[*i][c]);
                }
            }
        }
        ElementKind::Quad => {
            let lx = quadratic_1d(xi);
            let ly = quadratic_1d(eta);
            let dx = quadratic_1d_deriv(xi);
            let dy = quadratic_1d_deriv(eta);
            let comb = [
                (0usize, 0usize), // v0
                (2, 0),           // v1
                (2, 2),           // v2
                (0, 2),           // v3
                (1, 0),           // m01
                (2, 1),           // m12
                (1, 2),           // m23
                (0, 1),           // m30
                (1, 1),           // center
            ];
            let lxv = [lx.0, lx.1, lx.2];
            let lyv = [ly.0, ly.1, ly.2];
            let dxv = [dx.0, dx.1, dx.2];
            let dyv = [dy.0, dy.1, dy.2];
            for (n, (i, j)) in comb.iter().enumerate() {
                out[n][0] = dxv[*i] * lyv[*j];
                out[n][1] = lxv[*i] * dyv[*j];
            }
        }
    }
    out
}

fn pressure_basis(kind: ElementKind, xi: f64, eta: f64) -> [f64; MAX_P_NODES] {
    let mut out = [0.0; MAX_P_NODES];
    match kind {
        ElementKind::Triangle => {
            out[0] = 1.0 - xi - eta;
            out[1] = xi;
            out[2] = eta;
        }
        ElementKind::Quad => {
            out[0] = 0.25 * (1.0 - xi) * (1.0 - eta);
            out[1] = 0.25 * (1.0 + xi) * (1.0 - eta);
            out[2] = 0.25 * (1.0 + xi) * (1.0 + eta);
            out[3] = 0.25 * (1.0 - xi) * (1.0 + eta);
        }
    }
    out
}

fn pressure_basis_grad(kind: ElementKind, xi: f64, eta: f64) -> [[f64; 2]; MAX_P_NODES] {
    let mut out = [[0.0; 2]; MAX_P_NODES];
    match kind {
        ElementKind::Triangle => {
            out[0] = [-1.0, -1.0];
            out[1] = [1.0, 0.0];
            out[2] = [0.0, 1.0];
        }
        ElementKind::Quad => {
            out[0] = [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)];
            out[1] = [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)];
            out[2] = [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)];
            out[3] = [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)];
        }
    }
    out
}

/// 1D quadratic Lagrange basis at nodes -1, 0, +1.
fn quadratic_1d(t: f64) -> (f64, f64, f64) {
    (0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0))
}

fn quadratic_1d_deriv(t: f64) -> (f64, f64, f64) {
    (t - 0.5, -2.0 * t, t + 0.5)
}

/// Geometry of one element: Jacobian data at a reference point.
pub struct ElemGeom {
    pub verts: [Point2; 4],
    pub n_verts: usize,
    pub kind: ElementKind,
}

impl ElemGeom {
    pub fn from_mesh(mesh: &Mesh, e: usize) -> ElemGeom {
        let vs = mesh.element(e);
        let mut verts = [Point2::new(0.0, 0.0); 4];
        for (i, &v) in vs.iter().enumerate() {
            verts[i] = mesh.vertices[v];
        }
        ElemGeom {
            verts,
            n_verts: vs.len(),
            kind: mesh.element_kind,
        }
    }

    /// Jacobian of the reference-to-physical map at (xi, eta), and its
    /// determinant.
    pub fn jacobian(&self, xi: f64, eta: f64) -> ([[f64; 2]; 2], f64) {
        let j = match self.kind {
            ElementKind::Triangle => {
                let [p0, p1, p2, _] = self.verts;
                [[p1.x - p0.x, p2.x - p0.x], [p1.y - p0.y, p2.y - p0.y]]
            }
            ElementKind::Quad => {
                let g = pressure_basis_grad(ElementKind::Quad, xi, eta);
                let mut j = [[0.0; 2]; 2];
                for (i, p) in self.verts.iter().enumerate().take(4) {
                    j[0][0] += p.x * g[i][0];
                    j[0][1] += p.x * g[i][1];
                    j[1][0] += p.y * g[i][0];
                    j[1][1] += p.y * g[i][1];
                }
                j
            }
        };
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        (j, det)
    }

    /// Map a reference point to physical coordinates.
    pub fn map(&self, xi: f64, eta: f64) -> Point2 {
        match self.kind {
            ElementKind::Triangle => {
                let [p0, p1, p2, _] = self.verts;
                Point2::new(
                    p0.x + (p1.x - p0.x) * xi + (p2.x - p0.x) * eta,
                    p0.y + (p1.y - p0.y) * xi + (p2.y - p0.y) * eta,
                )
            }
            ElementKind::Quad => {
                let n = pressure_basis(ElementKind::Quad, xi, eta);
                let mut x = 0.0;
                let mut y = 0.0;
                for (i, p) in self.verts.iter().enumerate().take(4) {
                    x += p.x * n[i];
                    y += p.y * n[i];
                }
                Point2::new(x, y)
            }
        }
    }

    /// Inverse of the element map for affine elements (all triangles, and
    /// quads that are parallelograms, which is all this crate generates).
    pub fn inverse_map(&self, p: Point2) -> [f64; 2] {
        let (origin, j) = match self.kind {
            ElementKind::Triangle => {
                let (j, _) = self.jacobian(0.0, 0.0);
                (self.verts[0], j)
            }
            ElementKind::Quad => {
                let c = Point2::new(
                    0.25 * (self.verts[0].x + self.verts[1].x + self.verts[2].x + self.verts[3].x),
                    0.25 * (self.verts[0].y + self.verts[1].y + self.verts[2].y + self.verts[3].y),
                );
                let (j, _) = self.jacobian(0.0, 0.0);
                (c, j)
            }
        };
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let dx = p.x - origin.x;
        let dy = p.y - origin.y;
        [
            (j[1][1] * dx - j[0][1] * dy) / det,
            (-j[1][0] * dx + j[0][0] * dy) / det,
        ]
    }
}

/// Physical gradients from reference gradients: `g_phys = J^{-T} g_ref`.
pub fn physical_grad(j: &[[f64; 2]; 2], det: f64, g_ref: [f64; 2]) -> [f64; 2] {
    // J^{-1} = [[j11, -j01], [-j10, j00]] / det; J^{-T} rows are its columns.
    [
        (j[1][1] * g_ref[0] - j[1][0] * g_ref[1]) / det,
        (-j[0][1] * g_ref[0] + j[0][0] * g_ref[1]) / det,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_integrate_constants_to_reference_measure() {
        let (_, wt) = triangle_rule();
        assert!((wt.iter().sum::<f64>() - 0.5).abs() < 1e-15);
        let (_, wq) = quad_rule();
        assert!((wq.iter().sum::<f64>() - 4.0).abs() < 1e-14);
        let (_, we) = edge_rule();
        assert!((we.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_rule_is_degree_five() {
        // Exact monomial integrals over the reference triangle:
        // int xi^p eta^q = p! q! / (p + q + 2)!.
        let fact = |n: usize| (1..=n).product::<usize>() as f64;
        let (pts, wts) = triangle_rule();
        for p in 0..=5usize {
            for q in 0..=(5 - p) {
                let exact = fact(p) * fact(q) / fact(p + q + 2);
                let approx: f64 = pts
                    .iter()
                    .zip(&wts)
                    .map(|([x, y], w)| w * x.powi(p as i32) * y.powi(q as i32))
                    .sum();
                assert!(
                    (approx - exact).abs() < 1e-15,
                    "monomial xi^{p} eta^{q}: {approx} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn quad_rule_is_degree_seven_per_direction() {
        let (pts, wts) = quad_rule();
        for p in [0usize, 2, 4, 6] {
            let exact = 2.0 / (p as f64 + 1.0) * 2.0;
            let approx: f64 = pts
                .iter()
                .zip(&wts)
                .map(|([x, _], w)| w * x.powi(p as i32))
                .sum();
            assert!((approx - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn bases_are_nodal_and_partition_unity() {
        // P2 nodes on the reference triangle.
        let tri_nodes = [
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.5, 0.0],
            [0.5, 0.5],
            [0.0, 0.5],
        ];
        for (ni, &[x, y]) in tri_nodes.iter().enumerate() {
            let v = velocity_basis(ElementKind::Triangle, x, y);
            for bi in 0..6 {
                let expect = if bi == ni { 1.0 } else { 0.0 };
                assert!((v[bi] - expect).abs() < 1e-14);
            }
        }
        let quad_nodes = [
            [-1.0, -1.0],
            [1.0, -1.0],
            [1.0, 1.0],
            [-1.0, 1.0],
            [0.0, -1.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [-1.0, 0.0],
            [0.0, 0.0],
        ];
        for (ni, &[x, y]) in quad_nodes.iter().enumerate() {
            let v = velocity_basis(ElementKind::Quad, x, y);
            for bi in 0..9 {
                let expect = if bi == ni { 1.0 } else { 0.0 };
                assert!((v[bi] - expect).abs() < 1e-14);
            }
        }
        // Partition of unity at an interior point.
        for kind in [ElementKind::Triangle, ElementKind::Quad] {
            let v = velocity_basis(kind, 0.21, 0.17);
            let n = if kind == ElementKind::Triangle { 6 } else { 9 };
            let s: f64 = v[..n].iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            let g = velocity_basis_grad(kind, 0.21, 0.17);
            for c in 0..2 {
                let gs: f64 = g[..n].iter().map(|gi| gi[c]).sum();
                assert!(gs.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn inverse_map_round_trips() {
        let tri = ElemGeom {
            verts: [
                Point2::new(1.0, 2.0),
                Point2::new(3.0, 2.5),
                Point2::new(1.5, 4.0),
                Point2::new(0.0, 0.0),
            ],
            n_verts: 3,
            kind: ElementKind::Triangle,
        };
        let p = tri.map(0.3, 0.4);
        let [xi, eta] = tri.inverse_map(p);
        assert!((xi - 0.3).abs() < 1e-14 && (eta - 0.4).abs() < 1e-14);

        let quad = ElemGeom {
            verts: [
                Point2::new(2.0, 1.0),
                Point2::new(2.5, 1.0),
                Point2::new(2.5, 1.5),
                Point2::new(2.0, 1.5),
            ],
            n_verts: 4,
            kind: ElementKind::Quad,
        };
        let p = quad.map(-0.25, 0.75);
        let [xi, eta] = quad.inverse_map(p);
        assert!((xi + 0.25).abs() < 1e-14 && (eta - 0.75).abs() < 1e-14);
    }
}
