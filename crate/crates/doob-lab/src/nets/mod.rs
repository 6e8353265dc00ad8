//! Trainable eps-networks: a small MLP with built-in reverse-mode gradients,
//! every conditional training procedure, and the h-transform finetunes.

mod checkpoint;
mod finetune;
mod mlp;
mod model;
mod train;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
pub use finetune::{
    control_loss_and_grad, control_objective, finetune_control, ControlConfig, ControlResult,
    ControlWeight,
};
pub use mlp::{
    EpsNet, NetArch, Optimizer, OptimizerKind, Tape, TimeMode, DEFAULT_PAD_VALUE, N_TIME_FREQS,
};
pub use model::{
    Control, ControlledEpsModel, DynModel, FixedAuxEpsModel, NetControl, NetEpsModel,
    OracleControl, ResidualEpsModel, ZeroControl,
};
pub use train::{
    amortised_batch, classifier_free_batch, eps_loss, eps_loss_and_grad, finetune_offline,
    offline_residual_batch, rfdiff_batch, train_amortised, train_classifier_free,
    train_rfdiff_style, train_unconditional, unconditional_batch, ComponentLabelSource,
    DataSource, EpsBatch, IndependentAuxSource, JointSource, MaskSampler, TrainConfig,
    TrainResult,
};
