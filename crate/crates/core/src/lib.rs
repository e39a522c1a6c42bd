//! Nonlocal micromagnetic exchange energies with periodic microstructure:
//! kernels, cell problems, homogenized densities and macroscopic energies.

// Index loops mirror the component formulas; `!(x > 0.0)` rejects NaN on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod config;
pub mod error;
pub mod expr;
pub mod homogenized;
pub mod kernels;
pub mod linalg;
pub mod macro_energy;
pub mod microstructure;
pub mod quadrature;
pub mod reduce;
pub mod solver;
pub mod verification;

pub use error::{Error, Result};
