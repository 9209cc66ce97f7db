//! Maximum-likelihood training of [`FlowModel`](crate::flow::FlowModel)s.

mod adam;
mod loss;
mod trainer;

pub use adam::{adam_step, OptimizerState, ParamBlocks};
pub use loss::{grad_nll, nll_loss, Batch, FlowGradient, Nll};
pub use trainer::{split_dataset, train, LossHistory, StopReason, TrainConfig, TrainReport};
