//! Grid sweeps over algorithms, widths, learning rates, α initialisations
//! and seeds, with resumable CSV output, seed aggregation and best-config
//! selection.
//!
//! A sweep directory holds:
//!
//! | file                | contents                                                        |
//! |---------------------|-----------------------------------------------------------------|
//! | `sweep_config.json` | the config that produced the directory                          |
//! | `runs.csv`          | `algorithm,d,lr,alpha_init,seed,epoch,test_mse,diverged`        |
//! | `summary.csv`       | one row per finished run; its presence marks the run complete   |
//! | `agg.csv`           | `algorithm,d,lr,alpha_init,epoch,mean_test_mse,stderr,n_effective` |
//! | `best.json`         | the selected configuration per algorithm and width              |
//!
//! Floats are written with 17 significant digits. `alpha_init` is empty for
//! kinds without α.

mod config;
mod io;
mod stats;
mod sweep;

pub use config::{
    Criterion, Preset, RunConfig, SweepConfig, ALPHA_INIT_GRID, LR_GRID, SUPPORTED_WIDTHS,
};
pub use io::{format_float, run_rows, write_function_csv, FunctionRow, RUNS_HEADER};
pub use stats::{
    aggregate, final_window_len, final_window_mean, mean_stderr, select_best, AggregateCurve,
    BestConfig,
};
pub use sweep::{
    dataset_for_seed, dump_learned_function, restricted_mse, run_seed, run_sweep, seed_scores,
    test_grid, train_run, RunRecord, SeedScores, SweepOptions, SweepResult,
};

use std::path::Path;

use thiserror::Error;

use crate::synthdata::DataError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: String, message: String },
    #[error("sweep directory does not match the config: {0}")]
    Inconsistent(String),
    #[error("no usable configuration: {0}")]
    NoUsableConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub(crate) fn csv(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
