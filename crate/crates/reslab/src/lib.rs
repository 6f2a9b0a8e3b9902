//! Desk-scale laboratory for an embedded eigenvalue that turns into a resonance.
//!
//! A one-dimensional two-channel model: a free particle coupled to a harmonic
//! oscillator whose ground state sits inside the free continuum. The crate builds
//! the discretized Hamiltonian, its spectral cutoffs and projectors, the
//! golden-rule width, the reduced amplitude equation with its analytic
//! continuation, and the time-domain checks that tie them together.
//!
//! Modules are layered bottom-up:
//! [`model`] → [`spectral`] → [`fgr`] → [`resonance`] → [`dynamics`] → [`laplace`] → [`harness`].

pub mod dynamics;
pub mod fgr;
pub mod harness;
pub mod laplace;
mod linalg;
pub mod model;
pub mod resonance;
pub mod spectral;

/// Complex scalar used throughout. Identical to `faer::c64`.
pub type C64 = num_complex::Complex64;

pub use linalg::{extrapolate_to_zero, fit_line, LineFit};
