//! Waves on manifolds with cylindrical ends.
//!
//! The model operator is `H = -∂r² - Δ_Y + V(r)` on the half-cylinder
//! `(0, ∞) × Y` with a Dirichlet or Neumann condition at `r = 0`. Because `V`
//! does not depend on `y`, the problem splits into half-line channels
//! `h_j = -∂r² + σ_j² + V`, one for each eigenvalue `σ_j²` of `-Δ_Y`.
//!
//! The crate is organized bottom-up:
//!
//! * [`cross_section`] gives the thresholds `σ_j` and eigenfunctions on `Y`.
//! * [`mode_decomposition`] projects data onto those modes.
//! * [`halfline_scattering`] solves each channel: Jost and regular solutions,
//!   Green's function, scattering coefficient, bound states, threshold data.
//! * [`spectral_measure`] checks the jump identity of the resolvent.
//! * [`stationary_phase`] computes the threshold expansion coefficients.
//! * [`wave_evolution`] evolves the wave equation, spectrally or by leapfrog.
//! * [`expansion_assembly`] builds the eigenvalue and threshold expansions.
//! * [`decay_fit`] measures slopes, amplitudes, phases and spectral lines.
//! * [`experiment`] ties it together behind a JSON config.
//!
//! The low-level numerics (quadrature rules, cross-section spectra, power
//! series, the stationary-phase engine, leapfrog and fitting) are generic over
//! [`Scalar`]. The channel solvers work in [`Real`] because their tolerances
//! are below single precision.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cross_section;
pub mod decay_fit;
pub mod error;
pub mod expansion_assembly;
pub mod experiment;
pub mod halfline_scattering;
pub mod mode_decomposition;
pub mod quadrature;
pub mod scalar;
pub mod series;
pub mod spectral_measure;
pub mod stationary_phase;
pub mod wave_evolution;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of the channel solvers.
pub type Real = f64;

/// Complex numbers at working precision.
pub type Complex = num_complex::Complex<Real>;
