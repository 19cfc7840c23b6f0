//! Desk-scale one-step video face restoration with spatio-temporal
//! dual-codebook priors.

pub mod array_io;
pub mod backbone;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stdc;
pub mod video;

pub use error::{Error, Result};
