#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod base_learner;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod generalized;
pub mod error;
pub mod eval;
pub mod graph;
pub mod meta_learner;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
