//! Numerical simulator for temporally continuous position measurement.
//!
//! The crate evolves spinor wavefunctions under the measurement-damped
//! Schrödinger equation
//!
//! ```text
//! iħ ∂u/∂t = [H(t) + ħ H_s(t,x) − iħ W_s(t,x)] u
//! ```
//!
//! on a periodic grid, builds the interleaved unitary/damping product
//! formulas whose limit is that evolution, and provides a desk-scale
//! time-sliced path-integral oracle for independent cross-checks.
//!
//! Module map:
//!
//! * [`grid`]: regular periodic grids, spinor fields, norms, serialization.
//! * [`fields`]: potentials, Lagrangian, polyline paths, action, gauge maps.
//! * [`weights`]: measurement weight matrices and their verification.
//! * [`propagator`]: unitary and damped evolution backends.
//! * [`product`]: product formulas, subdivisions, convergence drivers.
//! * [`path_oracle`]: ordered weight factors and sliced kernels.
//! * [`scenarios`]: configuration, scenario drivers, result files.

// `!(a < b)` comparisons deliberately treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod fields;
pub mod grid;
pub mod linalg;
pub mod path_oracle;
pub mod product;
pub mod propagator;
pub mod quadrature;
pub mod scenarios;
pub mod weights;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

/// Dense complex matrix used for l×l spin-space operators.
pub type CMat = nalgebra::DMatrix<C64>;
