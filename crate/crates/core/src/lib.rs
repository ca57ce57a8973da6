//! Augmented ridge and random-feature regression with deterministic
//! equivalents for the out-of-sample risk.

pub mod datasets;
pub mod detequiv;
pub mod error;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod ridge;
pub mod rng;
pub mod schemes;

pub use error::{Error, Result};
