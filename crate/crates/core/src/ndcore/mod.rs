//! Dense tensors, the reverse-mode tape, layer primitives and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{bce_with_logit, cross_entropy, linear, soft_cross_entropy, GruCell, Linear, LstmCell, Mlp, PairHalves, PairMlp};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, softmax, NodeId, Tape};
pub use tensor::Tensor;
