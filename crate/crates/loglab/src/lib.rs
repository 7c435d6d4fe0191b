//! Simulation toolkit for thick points of log-correlated Gaussian fields:
//! multiscale path refinement, branching random walk and fractal percolation
//! samplers, white-noise field covariance and sampling, good-path moment
//! estimators, and the exponential metric.

pub mod brw;
pub mod cli;
pub mod error;
pub mod fractal;
pub mod gaussian;
pub mod geometry;
pub mod metric;
pub mod whitenoise;
pub mod paths;
pub mod quad;
pub mod rng;

pub use error::{LabError, Result};
