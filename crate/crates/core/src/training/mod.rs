//! Target assignment, the multi-task loss, SGD training and checkpoints.

mod checkpoint;
mod loss;
mod targets;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC,
    VERSION,
};
pub use loss::{compute_loss, LossBreakdown, LossVars, LossWeights, NetOutputs, StepPlan};
pub use targets::{
    assign_head_targets, assign_rpn_targets, sample_balanced, sample_head_minibatch,
    sample_rpn_minibatch, AnchorLabel, HeadTargets, RpnTargets,
};
pub use trainer::{
    diagnostic_path, epoch_order, format_loss_csv, loss_and_gradients, loss_for_plan, plan_step,
    step_seed, trailing_mean, train_loop, train_step, training_samples, write_loss_csv,
    TrainConfig, Trainer, LOSS_CSV_HEADER,
};
