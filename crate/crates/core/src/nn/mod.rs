//! Minimal CPU neural-network engine: dense tensors, layers with hand-written
//! backward passes, losses and optimizers.

mod layers;
mod loss;
mod optim;
mod scalar;
mod tensor;

pub use layers::{
    BatchNorm2d, Conv2d, ConvGeometry, ConvTranspose2d, Layer, Linear, Mode, Param, Rectifier,
    Reshape, Sequential,
};
pub use loss::{cross_entropy, cross_entropy_grad, cross_entropy_terms, mse, softmax};
pub use optim::{Adam, Optimizer, OptimizerConfig, OptimizerKind, Sgd};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
