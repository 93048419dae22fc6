//! Finite-volume upscaling toolkit for diffusion problems with a strong
//! nonlinear drift on perforated periodic media.
//!
//! The crate solves the periodic cell problems of homogenization with drift
//! on a perforated unit cell, assembles the effective drift vector and the
//! state-dependent dispersion tensor, advances the upscaled quasi-linear
//! parabolic problem on truncated domains, and validates the upscaled model
//! against a fully resolved fine-scale simulation in a moving frame.
//!
//! All numerical kernels are generic over the floating-point scalar through
//! [`Scalar`]; the pipeline and CLI instantiate everything with [`Real`].

pub mod cell;
pub mod config;
pub mod geometry;
pub mod io;
pub mod micro;
pub mod pipeline;
pub mod scalar;
pub mod sparse;
pub mod tensors;
pub mod upscaled;

pub use scalar::Scalar;

/// Concrete scalar used by the CLI and the pipeline.
pub type Real = f64;

/// Cell geometry at the default pipeline precision.
pub type CellGeometryF64 = geometry::CellGeometry<Real>;
/// Sparse matrix at the default pipeline precision.
pub type SparseMatrixF64 = sparse::SparseMatrix<Real>;
/// Effective tensors at the default pipeline precision.
pub type EffectiveTensorsF64 = tensors::EffectiveTensors<Real>;
