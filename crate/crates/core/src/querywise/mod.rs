//! Stage two: student training on labeled and unlabeled proxy data under an
//! anchor and an EMA teacher.

mod loss;
mod trainer;

pub use loss::{
    apply_logit_adjustment, confidence_mask, distillation_loss, labeled_loss, total_loss, unlabeled_loss,
    KdOrder, LossConfig, LossGrad, TotalLoss, UnlabeledLoss,
};
pub use trainer::{
    train_student, train_student_observed, write_student_trace, BatchPlan, StepView, StudentEpoch,
    StudentInit, StudentOutcome, StudentSchedule,
};
