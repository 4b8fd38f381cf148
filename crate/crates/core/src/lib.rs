//! Targeted transfer attacks on small image classifiers.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod transforms;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
