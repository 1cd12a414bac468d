pub mod adapter;
pub mod attention;
pub mod diffusion;
pub mod error;
pub mod fixture;
pub mod gradcheck;
pub mod injection;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
