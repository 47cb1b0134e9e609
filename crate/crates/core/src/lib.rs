pub mod autograd;
pub mod checkpoint;
pub mod colorspace;
pub mod customize;
pub mod data;
pub mod error;
pub mod image_io;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod quantizer;
pub mod scalar;
pub mod ssim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

/// Single-precision model, the default for training and serving.
pub type Model = network::Bcnet<f32>;
pub type Image = colorspace::RgbImage<f32>;
pub type ModelCheckpoint = checkpoint::Checkpoint<f32>;
pub type ImageTensor = tensor::Tensor<f32>;
