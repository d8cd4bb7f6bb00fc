//! Experiment driver: corpus generation, training runs, evaluation and sweeps.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, load_data, thread_budget, GenerateSummary, SweepAggregate,
    SweepAxis, SweepRun, SweepSpec, SweepSummary, TrainSummary, METRICS_COLUMNS, SWEEP_COLUMNS,
};
pub use config::{load_config, parse_config, CorpusSource, ExperimentConfig, Overrides};
pub use error::{CliError, ConfigError};
