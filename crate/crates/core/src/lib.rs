pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod datakit;
pub mod decomposition;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod params;
pub mod preference;
pub mod reward;
pub mod rng;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
