//! Experiment driver: dataset generation, pretraining, training, evaluation,
//! occlusion maps, hyperparameter search and reporting.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_occlude, cmd_pretrain, cmd_report, cmd_search, cmd_train, strategy_label, Layout,
};
pub use config::ExperimentConfig;
