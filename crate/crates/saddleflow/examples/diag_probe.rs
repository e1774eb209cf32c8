use saddleflow::assembly::*;
use saddleflow::krylov::*;
use saddleflow::linalg::*;
use saddleflow::mesh::*;
use saddleflow::precond::*;

fn main() {
    for (pair, name) in [(ElementPair::P2P1, "plain"), (ElementPair::P2P1Star, "star ")] {
        for level in [4u32, 5, 6] {
            let mesh = build_cavity_mesh(level, ElementKind::Triangle);
            let (sys, dm) = assemble_stokes(&mesh, pair, Problem::Cavity2d);
            let mq = assemble_pressure_mass(&mesh, &dm).full();
            let p1 = StokesBlockDiag::p1(&sys, &mq, &dm).unwrap();
            let b = sys.rhs();
            let r = minres(&sys, &b, &p1, &MinresOptions { rtol: 1e-12, maxit: 300, ..Default::default() }).unwrap();
            let gamma1 = r.residual_history[0];
            let bnorm = norm2(&b);
            // first iteration where |eta| <= 1e-8 * ||b||_2
            let ell2_stop = r
                .residual_history
                .iter()
                .position(|&e| e <= 1e-8 * bnorm)
                .unwrap_or(usize::MAX);
            println!(
                "{} level {}: gamma1/||b||_2 = {:.2}, iters(|eta|<=1e-8*||b||_2) = {}",
                name, level, gamma1 / bnorm, ell2_stop
            );
            let _ = dm;
        }
    }
}
