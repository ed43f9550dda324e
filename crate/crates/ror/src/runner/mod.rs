//! Orchestration: configuration profiles, the training loop, checkpoint
//! round-trips, split evaluation, and single-image removal. The binary in
//! `main.rs` chains these as `generate → train → eval → remove`.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod remove;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointView};
pub use config::{
    load_gen_config, load_train_config, parse_train_config, EarlyStop, OptimConfig, TrainConfig,
    PROFILE_DESK, PROFILE_OVERFIT, PROFILE_FULL480,
};
pub use evaluate::{evaluate, EvalOutcome, ExpressionScore, PR_THRESHOLDS};
pub use remove::{remove, RemoveOutcome};
pub use train::{fit_tagger, train, TrainLogRecord, TrainOutcome};
