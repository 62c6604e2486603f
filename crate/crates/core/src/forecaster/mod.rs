//! Mixture-density MLP trained on the composite likelihood.

mod adam;
mod checkpoint;
mod network;
mod train;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use network::{
    forward, loss_and_grad, loss_and_grad_grouped, Architecture, GradientTape, LayoutEntry, LossAndGrad, NormalizedOutput, ParameterSet,
    SCALE_FLOOR,
};
pub use train::{
    lr_at, train, train_with_plan, EvalRecord, Model, StepRecord, TrainConfig, TrainHistory, TrainPlan,
};
