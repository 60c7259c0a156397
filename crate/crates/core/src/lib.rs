//! Point-cloud completion toolkit: geometry, view synthesis, metrics,
//! relational kernels, the dual-path completion network and its training.

pub mod classifier;
mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pmnet;
pub mod renet;
pub mod rng;
pub mod training;
pub mod views;

pub use error::{Error, Result, ResultExt};
