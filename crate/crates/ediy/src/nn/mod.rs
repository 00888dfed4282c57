//! Numeric substrate: tensors, differentiable layers, the gradient tape,
//! optimizers, and EMA updates.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, VarId};
pub use layers::{forward_layers, init_layer_params, Binding, Layer};
pub use optim::{ema_update, lars_scale_step, optimizer_step, sgd_momentum_step, OptKind, OptState, OptimizerConfig};
pub use params::{GradSet, ParamSet};
pub use tensor::{cosine_similarity, matmul, Scalar, Tensor, COSINE_EPS};
