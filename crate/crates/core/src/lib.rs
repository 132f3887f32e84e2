//! Workbench for completing Euclidean distance matrices of fractional
//! Brownian motion trajectories.

pub mod complete;
pub mod diffusion;
pub mod edm;
pub mod error;
pub mod fbm;
pub mod fish;
pub mod io;
pub mod metrics;
pub mod rigidity;
pub mod rng;

pub use error::{Error, Result};
