//! Solver toolkit for elliptic boundary value problems on simplicial meshes.
//!
//! The pieces fit together as a three-step pipeline:
//!
//! 1. partition the mesh into overlapping subdomains and write one extended
//!    submesh file per subdomain (`decomposition`, `pipeline`),
//! 2. per subdomain, build an optimal local reduced basis from a weighted
//!    low-rank approximation of the boundary-to-interior lifting operator
//!    (`local_reduction`), each subdomain an independent worker,
//! 3. project the global system onto the collected bases without ever
//!    assembling the global matrix (`global_projection`) and solve the small
//!    reduced system (`reduced_solve`).
//!
//! `mesh` and `fem` provide the P1 finite element substrate; `sparse`,
//! `envelope`, and `dense` the linear algebra kernels.

pub mod dense;
pub mod decomposition;
pub mod envelope;
pub mod error;
pub mod fem;
pub mod global_projection;
pub mod local_reduction;
pub mod mesh;
pub mod pipeline;
pub mod reduced_solve;
pub mod sparse;

pub use error::CoreError;
