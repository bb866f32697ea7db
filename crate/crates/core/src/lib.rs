//! Weighted-particle simulation of a positively charged 2-D Vlasov–Poisson
//! plasma interacting with negative point charges.
//!
//! The plasma distribution is discretized as a set of weighted
//! characteristics ([`Particle`]); the charge–plasma force is regularized by
//! the mollified logarithm of [`mollifier`], the plasma self-field is summed
//! directly or with a quadtree ([`field`]), and [`dynamics`] advances the
//! coupled system. [`diagnostics`] and [`convergence`] turn a run into the
//! scalar quantities used to monitor it: energies, the running relative-energy
//! supremum, density bounds, collision statistics, charge separation and
//! Cauchy distances between regularization levels.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod diagnostics;
pub mod dynamics;
mod error;
pub mod field;
pub mod initial_data;
pub mod mollifier;
pub mod scalar;
pub mod summation;
mod types;

pub use error::{Error, Result};
pub use types::{ChargeState, Particle, PhasePoint, Vec2};
