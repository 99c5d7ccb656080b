//! Sparse 3D convolutions, dense 2D convolutions and residual blocks, each
//! with a taped variant whose record yields exact reverse-mode gradients.

mod conv2d;
mod kernel;
mod sparse3d;
mod tape;

pub use conv2d::{
    conv2d, conv2d_taped, residual_block2d, residual_block2d_taped, Conv2dGrads, Conv2dRecord,
    Padding, ResidualGrads, ResidualRecord,
};
pub use kernel::ConvKernel;
pub use sparse3d::{
    strided_sparse_conv3d, strided_sparse_conv3d_taped, submanifold_conv3d,
    submanifold_conv3d_taped, SparseConvGrads, SparseConvRecord,
};
pub use tape::{relu, relu_taped, GradTape, ReluRecord};
