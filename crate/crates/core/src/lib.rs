pub mod anchors;
pub mod config;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod losses;
pub mod sampler;
pub mod scenes;
pub mod svg;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
