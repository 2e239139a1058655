pub mod data;
pub mod encodings;
pub mod error;
pub mod harness;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod seg;

pub use error::{Error, Result};
