//! Shift/scale normalization, the regression head, losses with analytic
//! gradients, and the training loop.

mod loss;
mod model;
mod train;

pub use loss::{
    main_loss, per_id_mse, step_gradients, step_loss, total_loss, worst_id_risk, BatchGroup, FrozenTarget,
    LossBreakdown, LossOptions, StepBatch, StepPlan,
};
pub use model::{normalize, project, EncoderParams, ModelParams, ProjectorParams};
pub use train::{
    batch_groups, evaluate_ids, init_params, train, train_from, train_with_solver, LrDecay, Optimizer, StepRecord,
    TrainConfig, TrainOutcome,
};
