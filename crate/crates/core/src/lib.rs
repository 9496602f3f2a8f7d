//! Structured sequence mixers as explicit mixing matrices, their dense
//! replacements, and the tooling to train and compare both.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod mixers;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Shape};
