//! Streaming gate set tomography with an extended Kalman filter.
//!
//! A gate set is parameterized by Hamiltonian and stochastic error rates,
//! reduced to first-order gauge-invariant (FOGI) coordinates, and estimated
//! one circuit at a time. A batched maximum-likelihood fit over the same
//! data serves as the baseline.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64`, which every file format and the CLI use.

pub mod circuits;
pub mod data;
pub mod error;
pub mod filter;
pub mod forward;
pub mod gauge;
pub mod mle;
pub mod model;
pub mod ptm;
pub mod report;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type PauliBasis = ptm::PauliBasis<f64>;
pub type SuperOp = ptm::SuperOp<f64>;
pub type GateSetModel = model::GateSetModel<f64>;
pub type GateSetInstance = model::GateSetInstance<f64>;
pub type FogiBasis = gauge::FogiBasis<f64>;
pub type Observer<'a> = forward::Observer<'a, f64>;
pub type Linearization = forward::Linearization<f64>;
pub type FilterState = filter::FilterState<f64>;
