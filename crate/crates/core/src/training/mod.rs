//! Base-session pretraining under the combined visual + semantic
//! cross-entropy objective.

mod gradcheck;
mod loss;
mod schedule;
mod trainer;

pub use gradcheck::{finite_difference_check, BatchObjective, Differentiable, GradCheckReport, RELATIVE_FLOOR};
pub use loss::{cross_entropy, semantic_ce_loss, total_loss, visual_ce_loss};
pub use schedule::{lr_at, sgd_momentum_step, TrainConfig};
pub use trainer::{
    base_label_map, batch_loss, loss_log_csv, train_base_session, train_base_session_logged, BatchLoss, LossReport, Objective,
    PairBatch, TrainOutcome,
};
