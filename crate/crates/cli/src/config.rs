//! Run configuration: flat TOML with dotted keys, resolved against the
//! desk-scale defaults, hashed for checkpoint compatibility checks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use strata_data::DataConfig;
use strata_model::ModelConfig;

use crate::{cfg_err, Result};

/// Knobs shared by both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    /// Root seed; every random stream in a run derives from it by name.
    pub seed: u64,
    /// Samples per optimizer step (gradients averaged).
    pub batch: usize,
    /// Linear learning-rate warmup steps; 0 disables warmup.
    pub warmup_steps: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            seed: 42,
            batch: 16,
            warmup_steps: 0,
        }
    }
}

/// First training stage: joint entity and masked/prefix pretraining,
/// decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOneParams {
    pub lr: f64,
    pub wd: f64,
    pub epochs: usize,
    /// Weight of the entity losses; the masked/prefix losses get 1 - lambda.
    pub lambda: f64,
    /// Level switches for ablations. Off means the term is skipped entirely.
    pub use_low: bool,
    pub use_mid: bool,
}

impl Default for StageOneParams {
    fn default() -> Self {
        StageOneParams {
            lr: 5e-4,
            wd: 1e-2,
            epochs: 30,
            lambda: 0.25,
            use_low: true,
            use_mid: true,
        }
    }
}

/// Second training stage: mediator fine-tuning, plain (coupled) decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTwoParams {
    pub lr: f64,
    pub wd: f64,
    pub epochs: usize,
    pub use_vdm: bool,
    pub use_ldm: bool,
    /// Keep transferred encoder/decoder weights fixed; off fine-tunes all.
    pub freeze_shared: bool,
}

impl Default for StageTwoParams {
    fn default() -> Self {
        StageTwoParams {
            lr: 1e-5,
            wd: 5e-5,
            epochs: 10,
            use_vdm: true,
            use_ldm: true,
            freeze_shared: false,
        }
    }
}

/// One file configures everything; sections omitted from the file keep
/// the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainParams,
    pub stage1: StageOneParams,
    pub stage2: StageTwoParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| cfg_err(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural validity plus cross-section consistency: the model must
    /// fit the corpus it will be trained on.
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| cfg_err(format!("model: {e}")))?;
        self.data
            .validate()
            .map_err(|e| cfg_err(format!("data: {e}")))?;
        check_model_fits_data(&self.model, &self.data)?;
        if !(0.0..=1.0).contains(&self.stage1.lambda) {
            return Err(cfg_err(format!(
                "stage1.lambda = {} outside [0, 1]",
                self.stage1.lambda
            )));
        }
        if !self.stage1.use_low && !self.stage1.use_mid {
            return Err(cfg_err(
                "stage1 with both levels switched off has no loss to train",
            ));
        }
        if self.train.batch == 0 {
            return Err(cfg_err("train.batch must be positive"));
        }
        if self.stage1.epochs == 0 || self.stage2.epochs == 0 {
            return Err(cfg_err("epoch counts must be positive"));
        }
        for (name, lr) in [("stage1.lr", self.stage1.lr), ("stage2.lr", self.stage2.lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(cfg_err(format!("{name} = {lr} is not a positive rate")));
            }
        }
        for (name, wd) in [("stage1.wd", self.stage1.wd), ("stage2.wd", self.stage2.wd)] {
            if !(wd.is_finite() && wd >= 0.0) {
                return Err(cfg_err(format!("{name} = {wd} is not a valid decay")));
            }
        }
        Ok(())
    }
}

/// Shape agreement between a model and the corpus it reads. Also used at
/// generation time, where the model comes from a checkpoint header.
pub fn check_model_fits_data(model: &ModelConfig, data: &DataConfig) -> Result<()> {
    let pairs = [
        ("image_h", model.image_h, data.image_h),
        ("image_w", model.image_w, data.image_w),
        ("channels", model.channels, data.channels),
        ("vocab", model.vocab, data.vocab_size),
        ("n_max", model.n_max, data.n_max),
        ("num_entities", model.num_entities, data.num_entities),
        ("num_positions", model.num_positions, data.num_positions),
    ];
    for (name, m, d) in pairs {
        if m != d {
            return Err(cfg_err(format!(
                "model.{name} = {m} disagrees with the data section's {d}"
            )));
        }
    }
    Ok(())
}

/// Canonical-JSON SHA-256 of any serializable value.
pub fn json_hash<T: Serialize>(v: &T) -> String {
    let canon = serde_json::to_string(v).expect("value serializes");
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of the fully resolved configuration. Any field change, including
/// one supplied by a default, changes the hash.
pub fn config_hash(cfg: &RunConfig) -> String {
    json_hash(cfg)
}
