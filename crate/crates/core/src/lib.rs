pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fpan;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod predict;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{AttentionSite, Model, ModelConfig, Preset};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
