//! Attention-weighted two-teacher knowledge distillation.
//!
//! The frozen ancestor teacher (pretrained on the base classes) and father
//! teacher (the previous session's student) each produce token marginals on
//! the replay-augmented query set. A learnable bilinear score against the
//! gold labels weights the two, and the student is trained on the sum of the
//! cross entropy to the weighted teacher distribution and to the gold labels.

mod attention;
mod loss;
mod snapshot;
mod trainer;

pub use attention::{
    attention_scores, attention_scores_grad, combine_teachers, teacher_weights,
};
pub use loss::{
    distillation_loss, distillation_loss_grad, student_loss, student_loss_grad, total_loss,
    LossBreakdown, PROB_FLOOR,
};
pub use snapshot::{ModelSnapshot, SnapshotMeta, TeacherPair, SNAPSHOT_VERSION};
pub use trainer::{
    adapt_student, build_input, distillation_gradient, episodic_train, pretrain_base,
    teacher_predict, train_session, DistillGradient, DistillOptions, MethodFlags, PromptContext,
    SessionLog, StepLog, TeacherTargets, TrainConfig,
};
