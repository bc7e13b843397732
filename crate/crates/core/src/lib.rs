pub mod cfa;
pub mod classifier;
pub mod cg;
pub mod cs;
pub mod dataio;
pub mod deep;
pub mod error;
pub mod rng;
pub mod sensing;
pub mod tensor;

#[cfg(test)]
mod linalg_test;

pub use error::{Error, Result};
