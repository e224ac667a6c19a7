//! Online SGD for single-index teacher-student models, together with the
//! ballistic (ODE) and diffusive (SDE) limits of its summary statistics.

pub mod activation;
pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod integrators;
pub mod quadrature;
pub mod rng;
pub mod sgd;

pub use error::{Error, Result};
