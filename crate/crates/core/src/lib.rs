pub mod error;
pub mod evolution;
pub mod frequency;
pub mod kam;
pub mod norms;
pub mod operator;
pub mod pipeline;
pub mod regularizer;
pub mod spectral;

pub use error::{Error, Result};
