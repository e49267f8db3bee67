//! Training, evaluation, and persistence: run configuration, the AdamW
//! optimizer, the batch loop, EM/F1 metrics, checkpoints, and a synthetic
//! corpus generator for self-contained experiments.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, restore_params, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use metrics::{compute_em, compute_f1, normalize_answer, EvalReport, QuestionRecord};
pub use optim::AdamW;
pub use train::{encode_corpus, evaluate_model, model_config_for, train, train_on, Example, TrainOutcome, TrainedModel};
