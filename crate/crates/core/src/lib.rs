//! Virtual polarization testing for PEM water electrolyzers.
//!
//! A synthetic cell generates degradation-bearing operational and
//! polarization data; a patch-tokenized encoder-decoder transformer learns to
//! reconstruct polarization tests from snapshots of operational data.

pub mod cellsim;
pub mod characterize;
pub mod datapipe;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;
pub mod seed;

pub use error::{Error, Result};

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
