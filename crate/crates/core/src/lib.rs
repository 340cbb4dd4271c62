//! Simulation and statistical verification of random overlap structures.

pub mod cascade;
pub mod error;
pub mod estimate;
pub mod functions;
pub mod identity;
pub mod invariance;
pub mod linalg;
pub mod measure;
pub mod overlap;
pub mod runner;
pub mod seed;
pub mod spin;
pub mod ultrametric;

pub use error::{Error, Result};
