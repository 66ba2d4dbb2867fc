//! Minimal double-precision tensor engine: forward/backward kernels, a
//! reverse-mode tape, finite-difference gradient checking, and an SGD optimizer.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, Evaluation, GradcheckOptions, GradcheckReport};
pub use graph::{Graph, Mode, Var};
pub use kernels::resample::PoolMode;
pub use layers::{BatchNorm, Conv1d, Conv2d, Conv2dSpec};
pub use ops::{conv1d, pool_width, resample_height, ConvParams1D};
pub use optim::Sgd;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
