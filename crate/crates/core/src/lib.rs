pub mod autograd;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod corrupt;
pub mod data;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod repair;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use model::{build_camnet, partition_params, CamNet, ParamPartition, Trainable, WidthConfig};
pub use optim::{sgd_step, SgdState};
pub use tensor::{Element, Tensor, TensorError};
