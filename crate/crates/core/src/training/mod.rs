//! Training regimes: plain BCE, attention supervision, input gradient
//! regularization, adversarial noise and teacher-student token masking.

mod config;
mod loss;
mod objective;
mod optim;
mod run;

pub use config::{reference, IgrMode, Strategy, TrainConfig};
pub use loss::{
    bce_loss, bce_node, kl_divergence, kl_target, lr_schedule, supervised_attention_loss, supervised_attention_node,
    KL_FLOOR, PROB_CLAMP,
};
pub use objective::{
    apply_mask, baseline_embeddings, doc_objective, input_loss_grad, pgd_for_model, pgd_inner_max, tm_distill_loss,
    tm_learn_mask, DocGrad, Example, Extras, MaskState, PgdOutcome,
};
pub use optim::AdamW;
pub use run::{evaluate, examples, predict_all, train_run, EpochRecord, PgdStats, TrainOutcome};
