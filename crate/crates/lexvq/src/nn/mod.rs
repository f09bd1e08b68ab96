//! Parameterized layers, the optimizer, and the central parameter store.

mod checkpoint;
mod layers;
mod optim;
mod store;

pub use checkpoint::{
    load_params, load_train_state, read_tensors, save_train_state, write_tensors,
};
pub use layers::{glorot_uniform, Conv2dLayer, GraphConvLayer};
pub use optim::{Optimizer, OptimizerKind};
pub use store::{Binder, ParamStore};
