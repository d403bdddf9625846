pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod camera_sim;
pub mod raw_model;
pub mod hdr_merge;
pub mod masks;
pub mod net;
pub mod losses;
pub mod metrics;
pub mod formats;
pub mod training;
pub mod dataset;
