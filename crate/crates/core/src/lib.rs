//! Exact non-Markovian dynamics of fermionic open systems.
//!
//! The crate is organised bottom-up:
//!
//! - [`bath`]: spectral densities, Fermi occupations and two-time correlation kernels.
//! - [`coeffs`]: Volterra-type coefficient solvers producing the time-local
//!   master-equation coefficients `F(t)`.
//! - [`propagator`]: reduced density matrix propagation and observables.
//! - [`grassmann`]: finite Grassmann algebra with Berezin integration.
//! - [`sse`]: Grassmann-valued stochastic Schrödinger trajectories and the
//!   reconstruction of the reduced state.
//! - [`oracle`]: exact Fock-space and one-body references.

pub mod bath;
pub mod coeffs;
pub mod grassmann;
pub mod oracle;
pub mod propagator;
pub mod sse;

pub use num_complex::Complex64 as C64;
