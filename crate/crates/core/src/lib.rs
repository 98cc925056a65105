//! Overlapping domain decomposition for variational imaging.
//!
//! Subdomain overlaps are the *essential domains* of the energy integrand: the
//! smallest pixel sets whose values determine the integrand on each tile. On
//! the stacked space of subdomain fields the consensus constraint is enforced
//! by a decoupled augmented Lagrangian loop whose only communication step is a
//! pointwise average ([`decomp::OverlapLayout::project_consensus`]).
//!
//! Three models are provided: convex Chan–Vese segmentation, TV-L¹ deblurring
//! and Hessian-L¹ denoising, each with an accelerated primal-dual local solver
//! and a full-domain primal-dual baseline.

pub mod error;
pub mod field;
pub mod models;
pub mod decomp;
pub mod ops;
pub mod solvers;

pub use error::{Error, Result};
pub use field::{GridShape, PixelIndex, ScalarField, TensorField, VectorField};
