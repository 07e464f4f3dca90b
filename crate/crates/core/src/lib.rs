pub mod attack;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod purify;
pub mod rng;
pub mod sampler;
pub mod video;

pub use error::{Error, Result};
