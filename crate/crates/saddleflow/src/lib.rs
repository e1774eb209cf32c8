//! Saddle-point systems for incompressible flow, discretised with standard
//! and enriched (two-field pressure) Taylor-Hood finite elements, together
//! with the preconditioned Krylov machinery needed to solve them.
//!
//! The enriched spaces augment the continuous Taylor-Hood pressure with a
//! piecewise-constant pressure so that discrete solutions conserve mass
//! elementwise. Specifying that pressure space as a frame (the union of the
//! two bases) makes the pressure mass matrix singular, which in turn requires
//! nullspace-aware preconditioner solves throughout. This crate implements:
//!
//! - [`mesh`]: structured triangle/quad meshes of the driven-cavity and
//!   backward-step domains with full face topology,
//! - [`assembly`]: velocity/pressure operators, divergence blocks, the
//!   two-field pressure mass matrix, and pressure convection-diffusion
//!   operators,
//! - [`linalg`]: CSR kernels, sparse direct factorization, and solvers for
//!   singular systems constrained to a nullspace complement,
//! - [`krylov`]: preconditioned MINRES (with the Lanczos coefficients
//!   recorded) and full right-preconditioned GMRES,
//! - [`precond`]: block-diagonal Stokes preconditioners, Chebyshev/SGS mass
//!   approximations, block-triangular Oseen preconditioners (mass, two-field
//!   pressure convection-diffusion, least-squares commutator), and the
//!   two-stage solve driver,
//! - [`infsup`]: inf-sup constant estimation from the MINRES recurrence plus
//!   a dense eigenvalue oracle,
//! - [`flow`]: problem drivers (Stokes solves, Picard iteration for the
//!   Navier-Stokes benchmarks, divergence diagnostics),
//! - [`cli`]: the benchmark harness behind the `saddleflow` binary.
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `examples/stokes_cavity_table.rs`.

pub mod assembly;
pub mod cli;
mod error;
pub mod flow;
pub mod infsup;
pub mod krylov;
pub mod linalg;
pub mod mesh;
pub mod precond;

pub use error::{Error, Result};
