//! Two-phase U-net training: an encoder is first trained to regress the
//! centre of a target structure, then frozen and extended with a decoder
//! that learns to segment it.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod cli;
pub mod data;
pub mod eval;
pub mod image;
pub mod model;
pub mod preprocess;
pub mod train;
