//! Coupled FEM/BEM solver for time-harmonic structural acoustics of thin
//! shells, with geometry, displacement and pressure all discretised by Loop
//! subdivision surfaces.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity, clippy::assign_op_pattern)]

pub mod error;
pub mod linalg;
pub mod meshio;
pub mod surface;
pub mod scalar;
pub mod shell;
pub mod analytic;
pub mod bem;
pub mod coupling;
pub mod hmatrix;
pub mod quadrature;
pub mod study;
pub mod subdivision;

pub use error::{Error, Result};
pub use scalar::{Real, Vec3};

pub type C64 = num_complex::Complex<f64>;
pub type ControlMesh = subdivision::ControlMesh<f64>;
pub type ParamPoint = subdivision::ParamPoint<f64>;
pub type PatchBasis = subdivision::PatchBasis<f64>;
