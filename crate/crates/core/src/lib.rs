//! Mixture-of-experts transformer lab.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod params;
pub mod router;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
