//! Experiment harness: corpus generation, two-stage training, report
//! generation, metric evaluation, the ablation grids, and the exact
//! causal-adjustment verifier, all behind one binary.
//!
//! Every run is a pure function of (config, seed, inputs): no timestamps,
//! no ambient randomness, single-threaded numeric order. Two invocations
//! with equal arguments must produce byte-identical output trees.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evalio;
pub mod genreport;
pub mod manifest;
pub mod optim;
pub mod train;

pub use ablate::{mean_metric, run_grid, write_grid_csv, AblationRow, GridKind, LAMBDA_SWEEP};
pub use checkpoint::{load_checkpoint, save_checkpoint, transfer_shared, Checkpoint, STAGE_ONE, STAGE_TWO};
pub use config::{
    check_model_fits_data, config_hash, json_hash, RunConfig, StageOneParams, StageTwoParams,
    TrainParams,
};
pub use evalio::{
    eval_files, eval_pairs, parse_metric_list, read_token_lines, strip_markers,
    write_token_lines, EvalReport, HypLine, Metric,
};
pub use genreport::{generate_split, parse_decode};
pub use manifest::{corpus_hash, write_dir_manifest, write_file_manifest, RunManifest};
pub use optim::AdamOpt;
pub use train::{
    existence_accuracy, masked_mse_eval, stage1_nll_mean, stage2_nll_mean, train_stage1,
    train_stage2, write_loss_log, EpochLog, TrainedStage,
};

use thiserror::Error;

/// Process exit codes: 0 success, 2 configuration error, 3 numeric failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Everything that is not a numeric failure is a configuration problem:
/// bad keys, bad paths, malformed files, mismatched shapes.
pub fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("io: {e}"))
    }
}

impl From<strata_data::DataError> for CliError {
    fn from(e: strata_data::DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<strata_model::ModelError> for CliError {
    fn from(e: strata_model::ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<strata_tensor::TensorError> for CliError {
    fn from(e: strata_tensor::TensorError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("json: {e}"))
    }
}

impl From<strata_scm::ScmError> for CliError {
    fn from(e: strata_scm::ScmError) -> Self {
        CliError::Config(e.to_string())
    }
}
