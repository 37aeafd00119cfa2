pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod patch;
pub mod pipeline;
pub mod seed;
pub mod shapley;
pub mod utility;

pub use error::{Error, Result};
