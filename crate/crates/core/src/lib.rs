//! Singular perturbations of elliptic operators: discretized operators,
//! Birman–Schwinger operators on measures, resolvent differences and
//! spectral asymptotics.

pub mod birman_schwinger;
pub mod elliptic;
pub mod error;
pub mod linalg;
pub mod measures;
pub mod resolvents;
pub mod spectra;
pub mod weights;

pub use error::{Error, Result};
