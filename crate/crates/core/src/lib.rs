pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod params;
pub mod retentive;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
