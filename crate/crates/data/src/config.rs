//! Corpus generation parameters and their validity rules.

use serde::{Deserialize, Serialize};

use crate::glyph;
use crate::grammar;
use crate::DataError;

/// Everything that determines a corpus apart from the seed.
///
/// Two runs with equal config and equal seed must produce byte-identical
/// output directories. Fields omitted from a config file keep their
/// desk-scale defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image height in pixels.
    pub image_h: usize,
    /// Image width in pixels.
    pub image_w: usize,
    /// Image channels. Glyphs are stamped into every channel.
    pub channels: usize,
    /// Position grid rows; `pos_grid_h * pos_grid_w` must equal `num_positions`.
    pub pos_grid_h: usize,
    /// Position grid columns.
    pub pos_grid_w: usize,
    /// Number of distinct entity types.
    pub num_entities: usize,
    /// Number of distinct positions.
    pub num_positions: usize,
    /// Total vocabulary size; unused ids are padded with filler words.
    pub vocab_size: usize,
    /// Maximum report length in tokens, counting the begin and end markers.
    pub n_max: usize,
    /// Largest number of entities a single scene may contain.
    pub max_entities: usize,
    /// Background noise amplitude; pixels draw uniformly from [0, noise).
    pub noise: f64,
    /// Split sizes.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of train/val scenes that inject the confounded pair.
    pub confound_fraction: f64,
    /// The entity pair that co-occurs in train but never in test.
    pub confound_pair: (usize, usize),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_h: 32,
            image_w: 32,
            channels: 1,
            pos_grid_h: 4,
            pos_grid_w: 4,
            num_entities: 12,
            num_positions: 16,
            vocab_size: 128,
            n_max: 40,
            max_entities: 4,
            noise: 0.3,
            train: 512,
            val: 64,
            test: 64,
            confound_fraction: 0.5,
            confound_pair: (0, 1),
        }
    }
}

impl DataConfig {
    /// Rejects configurations that cannot produce a well-formed corpus.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.pos_grid_h == 0 || self.pos_grid_w == 0 {
            return bad("position grid must be positive".into());
        }
        if self.pos_grid_h * self.pos_grid_w != self.num_positions {
            return bad(format!(
                "position grid {}x{} does not cover num_positions = {}",
                self.pos_grid_h, self.pos_grid_w, self.num_positions
            ));
        }
        if self.image_h % self.pos_grid_h != 0 || self.image_w % self.pos_grid_w != 0 {
            return bad(format!(
                "image {}x{} is not divisible into a {}x{} position grid",
                self.image_h, self.image_w, self.pos_grid_h, self.pos_grid_w
            ));
        }
        if self.num_entities == 0 {
            return bad("need at least one entity type".into());
        }
        if self.max_entities == 0 {
            return bad("scenes must be allowed at least one entity".into());
        }
        // Scenes place distinct entities at distinct positions, so a scene
        // larger than either pool cannot exist.
        if self.max_entities > self.num_entities || self.max_entities > self.num_positions {
            return bad(format!(
                "max_entities = {} exceeds combinatorial capacity (entities {}, positions {})",
                self.max_entities, self.num_entities, self.num_positions
            ));
        }
        let cell = self.cell_h() * self.cell_w();
        if self.num_entities > cell {
            return bad(format!(
                "{} entities cannot have disjoint glyphs inside a {}-pixel cell",
                self.num_entities, cell
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise = {} outside [0, 1]", self.noise));
        }
        if self.noise >= glyph::MIN_INTENSITY {
            return bad(format!(
                "noise = {} reaches the minimum glyph intensity {}; presence would be ambiguous",
                self.noise,
                glyph::MIN_INTENSITY
            ));
        }
        if !(0.0..=1.0).contains(&self.confound_fraction) {
            return bad(format!(
                "confound_fraction = {} outside [0, 1]",
                self.confound_fraction
            ));
        }
        if self.train == 0 {
            return bad("train split must be nonempty".into());
        }
        if self.confound_fraction > 0.0 {
            let (a, b) = self.confound_pair;
            if a == b || a >= self.num_entities || b >= self.num_entities {
                return bad(format!(
                    "confound pair ({}, {}) is not two distinct entities below {}",
                    a, b, self.num_entities
                ));
            }
            // Test scenes must be able to avoid the pair without going empty.
            if self.num_entities < 3 {
                return bad(
                    "confounding needs at least 3 entity types so test scenes can break the pair"
                        .into(),
                );
            }
        }
        let needed_vocab = grammar::reserved_words(self.num_entities, self.num_positions);
        if self.vocab_size < needed_vocab {
            return bad(format!(
                "vocab_size = {} cannot hold the {} required words",
                self.vocab_size, needed_vocab
            ));
        }
        let longest = grammar::max_report_len(self.max_entities);
        if self.n_max < longest {
            return bad(format!(
                "n_max = {} is below the longest possible report ({} tokens)",
                self.n_max, longest
            ));
        }
        Ok(())
    }

    /// Pixel height of one position cell.
    pub fn cell_h(&self) -> usize {
        self.image_h / self.pos_grid_h
    }

    /// Pixel width of one position cell.
    pub fn cell_w(&self) -> usize {
        self.image_w / self.pos_grid_w
    }

    /// Floats per image.
    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}
