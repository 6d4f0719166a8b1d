//! Three-level report-generation model.
//!
//! The model is organized around one shared parameter store and three loss
//! surfaces that attach to it:
//!
//! * low level: entity queries attend over visual tokens and predict which
//!   entities exist and where ([`eclo`]);
//! * mid level: a prefix language-modeling loss and a masked-image
//!   reconstruction loss share one decoder trunk ([`plm`], [`mim`]);
//! * high level: the same trunk decodes reports while two pooled mediator
//!   summaries are injected into every block through zero-initialized
//!   cross-attention ([`mediator`], [`model`]).
//!
//! Everything is generic over the scalar type so the whole forward/backward
//! path can be finite-difference checked at f64 while training runs at f32.

pub mod check;
pub mod config;
pub mod decoder;
pub mod eclo;
pub mod encoder;
pub mod generate;
pub mod mediator;
pub mod mim;
pub mod model;
pub mod plm;

pub use check::{full_model_fd_check, FdReport};
pub use config::{AccumMode, ClsForm, ConcatAxis, DecodeMode, LocForm, ModelConfig};
pub use decoder::DecoderTrunk;
pub use eclo::{EntityHeads, EntityPrediction};
pub use encoder::{patchify, TextEmbedder, VisualEncoder};
pub use generate::{decode_report, DecodeConfig};
pub use mediator::{top_k_indices, MediatorStack};
pub use mim::{make_mask_plan, MaskPlan};
pub use model::{Model, StageTwoParts};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] strata_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
