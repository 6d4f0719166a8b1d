use crate::{ModelError, Result};
use serde::{Deserialize, Serialize};

/// Form of the entity-existence classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsForm {
    /// Summed binary cross-entropy over all entity slots.
    Full,
    /// Only the positive terms: -sum_k ln s_hat[t_k].
    Literal,
}

/// Form of the entity-location contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocForm {
    /// InfoNCE: -mean_k ln softmax(scores_k)[true].
    Infonce,
    /// Negated mean softmax probability of the true position, in [-1, 0].
    Literal,
}

/// How per-layer received-attention scores combine across encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumMode {
    Sum,
    Product,
}

/// Axis along which the two visual-mediator branches are concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatAxis {
    /// [k x 2d] -> FFN back to d. The default.
    Feature,
    /// [2k x d] -> FFN keeps d.
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

/// Static shape and behavior of the model. Everything the parameter
/// declarations depend on lives here; two equal configs declare
/// byte-compatible stores. Fields omitted from a config file keep their
/// desk-scale defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// FFN hidden width as a multiple of d.
    pub ffn_mult: usize,
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub vocab: usize,
    pub n_max: usize,
    /// Number of entity types (one query slot each).
    pub num_entities: usize,
    /// Number of position classes in the location table.
    pub num_positions: usize,
    /// Negative positions per InfoNCE term.
    pub eclo_negatives: usize,
    pub cls_form: ClsForm,
    pub loc_form: LocForm,
    /// Fraction of patches masked for reconstruction.
    pub mim_rate: f64,
    /// Probability that a PLM step drops the visual context.
    pub plm_no_vision_prob: f64,
    /// Local visual tokens kept by received-attention selection.
    pub vdm_k: usize,
    pub vdm_accum: AccumMode,
    pub vdm_concat: ConcatAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default, matched to the default synthetic corpus.
    pub fn desk() -> Self {
        let cfg = ModelConfig {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            patch: 4,
            image_h: 32,
            image_w: 32,
            channels: 1,
            vocab: 128,
            n_max: 40,
            num_entities: 12,
            num_positions: 16,
            eclo_negatives: 7,
            cls_form: ClsForm::Full,
            loc_form: LocForm::Infonce,
            mim_rate: 0.85,
            plm_no_vision_prob: 0.1,
            vdm_k: 8,
            vdm_accum: AccumMode::Sum,
            vdm_concat: ConcatAxis::Feature,
        };
        debug_assert!(cfg.validate().is_ok());
        cfg
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    /// Number of visual tokens.
    pub fn n_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return err(format!(
                "image {}x{} is not divisible into {0}x{0} patches",
                self.image_h, self.image_w
            ));
        }
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_mult == 0 {
            return err("layer counts and ffn_mult must be positive".into());
        }
        if self.vocab < 4 {
            return err(format!("vocab={} cannot hold the special tokens", self.vocab));
        }
        if self.n_max < 2 {
            return err(format!("n_max={} leaves no room for a prefix/suffix split", self.n_max));
        }
        if self.num_entities == 0 || self.num_positions == 0 {
            return err("entity and position counts must be positive".into());
        }
        if self.eclo_negatives == 0 || self.eclo_negatives >= self.num_positions {
            return err(format!(
                "eclo_negatives={} must be in [1, num_positions-1={}]",
                self.eclo_negatives,
                self.num_positions.saturating_sub(1)
            ));
        }
        if !(self.mim_rate > 0.0 && self.mim_rate < 1.0) {
            return err(format!("mim_rate={} must lie strictly inside (0, 1)", self.mim_rate));
        }
        if !(0.0..=1.0).contains(&self.plm_no_vision_prob) {
            return err(format!("plm_no_vision_prob={} outside [0, 1]", self.plm_no_vision_prob));
        }
        if self.vdm_k == 0 || self.vdm_k > self.n_patches() {
            return err(format!(
                "vdm_k={} must be in [1, n_patches={}]",
                self.vdm_k,
                self.n_patches()
            ));
        }
        Ok(())
    }

    /// Extra constraints that only the high-level forward needs.
    pub fn validate_stage2(&self) -> Result<()> {
        self.validate()?;
        if self.grid_h() % 2 != 0 || self.grid_w() % 2 != 0 {
            return Err(ModelError::Config(format!(
                "global pooling needs an even patch grid, got {}x{}",
                self.grid_h(),
                self.grid_w()
            )));
        }
        Ok(())
    }

    /// Default k for local-token selection: ceil(N/8).
    pub fn default_vdm_k(n_patches: usize) -> usize {
        n_patches.div_ceil(8)
    }
}
