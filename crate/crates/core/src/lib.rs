//! Numerical laboratory for randomly forced finite-dimensional Schrödinger
//! systems `i z' = Lambda z + beta(t) B z + eps F(z)` on the unit sphere of
//! `C^n`: the forcing model, the unit-time Markov chain, exact steering by
//! bilinear controls, and Monte Carlo mixing diagnostics.

pub mod control;
pub mod dynamics;
pub mod ergodicity;
pub mod error;
pub mod galerkin;
pub mod linalg;
pub mod noise;
pub mod quadrature;
pub mod system;

pub use error::{Error, Result};
pub use linalg::{Cvec, HermitianMatrix, SpectralData};
pub use num_complex::Complex64 as C64;
pub use system::{sys_a, sys_b, SystemSpec};
