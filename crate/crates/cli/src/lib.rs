//! Experiment orchestration behind the `gaclab` binary: configuration
//! loading and the synth, train, eval, gradcheck and sweep commands.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_gradcheck, cmd_synth, cmd_sweep, cmd_train, train_experiment, EvalRequest, GradcheckSummary,
    SplitRecord, SweepAxis, SweepRow, TrainOutcome,
};
pub use config::{parse_ratios, ExperimentConfig, EvalConfig, LabelConfig, SEED_ENV};
