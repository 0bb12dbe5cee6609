//! Numerical toolkit for stochastic homogenization of random spring networks
//! on the scaled lattice `εZ^d`.
//!
//! The library is organized around a small set of interlocking pieces:
//!
//! * [`lattice`] — finite windows of `εZ^d`, lattice functions, discrete
//!   gradient/divergence, and the interpolation operators that move between
//!   lattice and continuum descriptions.
//! * [`probability`] — finite probability spaces with a measure-preserving
//!   `Z^d` shift action, stationary random variables and fields, the
//!   horizontal derivative calculus, and the space of potential fields.
//! * [`unfolding`] — the stochastic unfolding operator, its inverse (folding),
//!   two-scale convergence diagnostics, and recovery-sequence constructions.
//! * [`graph`] — periodic spring-network connectivity, symmetrized gradients
//!   along generator bonds, and discrete Korn inequalities.
//! * [`corrector`] — cell problems on the probability space, homogenized
//!   energy densities, and effective elasto-plastic tensors.
//! * [`statics`] — ε-level elastic minimization problems, their homogenized
//!   limits, and convergence studies.
//! * [`eris`] — energetic rate-independent systems: incremental minimization
//!   for elasto-plastic networks, energy-balance certificates, and evolutionary
//!   convergence studies.
//!
//! Everything is deterministic: random data is generated from seeded streams
//! and all floating-point reductions use a fixed summation order, so a given
//! configuration and seed always reproduce byte-identical outputs.

pub mod corrector;
pub mod eris;
mod error;
pub mod graph;
pub mod lattice;
pub mod probability;
pub mod solver;
pub mod statics;
pub mod unfolding;
pub mod util;

pub use error::{Error, Result};
