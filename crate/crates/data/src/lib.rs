//! Procedural multimodal corpus: glyph images paired with template reports.
//!
//! Scenes place distinct entities at distinct grid positions; images render
//! them as disjoint-support glyphs over uniform background noise; reports
//! realize them as one clause per entity. Everything is deterministic in
//! (config, seed), down to the stored bytes, and the grammar and renderer
//! are both exactly invertible so labels can be audited from the artifacts.

pub mod config;
pub mod corpus;
pub mod glyph;
pub mod grammar;
pub mod render;
pub mod scene;
pub mod vocab;

pub use config::DataConfig;
pub use corpus::{
    generate_corpus, scene_of_line, CorpusManifest, CorpusMeta, CorpusReader, LoadedSample,
    ManifestLine, SplitCounts, IMAGES_FILE, MANIFEST_FILE, META_FILE, VOCAB_FILE,
};
pub use grammar::{parse_report, realize_report, GRAMMAR_VERSION};
pub use render::{detect_entities, render_image};
pub use scene::{sample_scene, SceneSpec, Split};
pub use vocab::{Vocab, BOS, EOS, PAD};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
