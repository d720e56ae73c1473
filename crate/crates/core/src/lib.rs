//! Variable-order H² compression of Gevrey kernels and multilevel sample
//! covariance estimation on nested panel meshes.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] builds meshes, cluster trees, nested hierarchies and
//!   block-cluster trees.
//! * [`interp`] provides Chebyshev tensor interpolation and the rank schedule.
//! * [`h2`] holds the per-cluster operators and the [`h2::H2Kernel`] container.
//! * [`sampling`] provides the reference kernels and the Karhunen–Loève sampler.
//! * [`estimator`] implements the single- and multilevel estimators.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

// Links the system OpenBLAS that backs the LAPACK decompositions.
extern crate openblas_src as _;

pub mod error;
pub mod estimator;
pub mod geometry;
pub mod h2;
pub mod interp;
pub mod linalg;
pub mod quadrature;
pub mod sampling;

pub use error::{Error, Result};
