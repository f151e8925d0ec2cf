pub mod diffusion;
pub mod error;
pub mod kan;
pub mod kspace;
pub mod mcmodel;
pub mod mfukan;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
