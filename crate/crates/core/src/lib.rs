//! Penalized semismooth Newton and constraint energy minimizing multiscale solvers for
//! scalar Signorini contact problems in high-contrast media on the unit square.

pub mod cem;
pub mod contact;
pub mod error;
pub mod fem;
pub mod field;
pub mod linsolve;
pub mod mesh;
pub mod metrics;
pub mod oracle;
pub mod sparse;
pub mod spectral;

pub use error::{Error, Result};
