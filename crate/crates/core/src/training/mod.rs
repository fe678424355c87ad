//! Multi-task loss, optimizers, episodic training, proxy pretraining and
//! hyperparameter search.

pub mod dataset;
pub mod loss;
pub mod optim;
pub mod pretrain;
pub mod search;
pub mod trainer;

pub use dataset::{Dataset, Sample};
pub use loss::{bce_with_logits, multitask_loss, LossBreakdown, Objective, Targets};
pub use optim::{Optimizer, OptimizerKind};
pub use pretrain::{pretrain_proxy, PretrainResult};
pub use search::{hyperparameter_search, SearchResult, SearchSpace, Trial};
pub use trainer::{
    run_curriculum_training, train_episode, train_plan, EpochRecord, EpisodeSummary, LogRow, StopReason, TrainConfig,
    TrainResult,
};
