//! Two-stage training: the language-modelling and top-k distillation losses,
//! stage-wise freezing, AdamW with a cosine schedule, the synthetic
//! long-context tasks and their evaluation.

mod experiment;
mod loss;
mod optim;
mod task;
mod train;

pub use experiment::{Axis, ExperimentConfig, SweepReport, Variant, VariantOutcome, VariantSummary};
pub use loss::{
    combined_loss, combined_loss_value, distill_loss, distill_loss_value, lm_loss, lm_loss_value, top_k_indices,
};
pub use optim::{clip_global_norm, cosine_lr, AdamW};
pub use task::{brute_force_reader, generate_task, Codebook, SyntheticTask, TaskInstance, TaskKind};
pub use train::{
    binomial_upper_tail, evaluate, parse_flag, train, write_log, EvalReport, LogRecord, Stage, TrainConfig, LAMBDA_GRID,
};
