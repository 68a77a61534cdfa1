//! Sparse-preconditioned No-U-Turn sampling.

pub mod diagnostics;
pub mod experiment;
pub mod laplace;
pub mod models;
pub mod nuts;
pub mod precondition;
pub mod sparse;
