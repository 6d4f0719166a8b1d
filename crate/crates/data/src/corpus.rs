//! Corpus materialization: manifest.jsonl + images.f32 + vocab.json +
//! corpus_meta.json, byte-deterministic for a fixed (config, seed).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::grammar::{self, GRAMMAR_VERSION};
use crate::render::render_image;
use crate::scene::{sample_scene, SceneSpec, Split};
use crate::vocab::Vocab;
use crate::DataError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_FILE: &str = "images.f32";
pub const VOCAB_FILE: &str = "vocab.json";
pub const META_FILE: &str = "corpus_meta.json";

/// One manifest.jsonl line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    /// [height, width, channels].
    pub shape: [usize; 3],
    pub tokens: Vec<u32>,
    /// (entity_id, position_id) pairs sorted by position.
    pub entities: Vec<(usize, usize)>,
    pub image_file: String,
    /// Byte offset of this sample's pixels inside `image_file`.
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// corpus_meta.json contents; everything a consumer needs to interpret the
/// other three files without re-deriving the generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub grammar_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub counts: SplitCounts,
    pub config: DataConfig,
}

/// Generation result: the on-disk metadata plus the vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub meta: CorpusMeta,
    pub vocab: Vocab,
}

fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{:06}", split.as_str(), index)
}

/// Generates the full corpus under `out_dir`, creating it if needed.
/// `config_hash` is recorded verbatim in corpus_meta.json.
pub fn generate_corpus(
    cfg: &DataConfig,
    seed: u64,
    config_hash: &str,
    out_dir: &Path,
) -> Result<CorpusManifest, DataError> {
    cfg.validate()?;
    let vocab = Vocab::new(
        cfg.num_entities,
        cfg.num_positions,
        cfg.pos_grid_w,
        cfg.vocab_size,
    )?;
    fs::create_dir_all(out_dir)?;

    let mut manifest = BufWriter::new(File::create(out_dir.join(MANIFEST_FILE))?);
    let mut images = BufWriter::new(File::create(out_dir.join(IMAGES_FILE))?);
    let mut byte_offset: u64 = 0;
    let counts = SplitCounts {
        train: cfg.train,
        val: cfg.val,
        test: cfg.test,
    };
    for split in Split::ALL {
        for i in 0..counts.get(split) {
            let scene = sample_scene(cfg, seed, split, i);
            let tokens = grammar::realize_report(&scene, &vocab);
            debug_assert!(tokens.len() <= cfg.n_max);
            let image = render_image(&scene, cfg);
            for &px in &image {
                images.write_all(&px.to_le_bytes())?;
            }
            let line = ManifestLine {
                id: sample_id(split, i),
                shape: [cfg.image_h, cfg.image_w, cfg.channels],
                tokens,
                entities: scene.entities.clone(),
                image_file: IMAGES_FILE.to_string(),
                byte_offset,
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.write_all(b"\n")?;
            byte_offset += (image.len() * 4) as u64;
        }
    }
    manifest.flush()?;
    images.flush()?;

    let meta = CorpusMeta {
        grammar_version: GRAMMAR_VERSION.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        counts,
        config: cfg.clone(),
    };
    let mut meta_file = BufWriter::new(File::create(out_dir.join(META_FILE))?);
    serde_json::to_writer_pretty(&mut meta_file, &meta)?;
    meta_file.write_all(b"\n")?;
    meta_file.flush()?;

    let mut vocab_file = BufWriter::new(File::create(out_dir.join(VOCAB_FILE))?);
    serde_json::to_writer_pretty(&mut vocab_file, vocab.words())?;
    vocab_file.write_all(b"\n")?;
    vocab_file.flush()?;

    Ok(CorpusManifest { meta, vocab })
}

/// A sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub shape: [usize; 3],
    pub tokens: Vec<u32>,
    pub entities: Vec<(usize, usize)>,
    pub image: Vec<f32>,
}

/// Read-side view of a generated corpus directory.
pub struct CorpusReader {
    dir: PathBuf,
    pub meta: CorpusMeta,
    pub vocab: Vocab,
    lines: Vec<ManifestLine>,
}

impl CorpusReader {
    pub fn open(dir: &Path) -> Result<CorpusReader, DataError> {
        let meta: CorpusMeta = serde_json::from_reader(File::open(dir.join(META_FILE))?)?;
        if meta.grammar_version != GRAMMAR_VERSION {
            return Err(DataError::Corpus(format!(
                "grammar version {} on disk, {} supported",
                meta.grammar_version, GRAMMAR_VERSION
            )));
        }
        let words: Vec<String> = serde_json::from_reader(File::open(dir.join(VOCAB_FILE))?)?;
        let vocab = Vocab::new(
            meta.config.num_entities,
            meta.config.num_positions,
            meta.config.pos_grid_w,
            meta.config.vocab_size,
        )?;
        if vocab.words() != words.as_slice() {
            return Err(DataError::Corpus(
                "vocab.json does not match the configuration in corpus_meta.json".into(),
            ));
        }
        let mut lines = Vec::with_capacity(meta.counts.total());
        for line in BufReader::new(File::open(dir.join(MANIFEST_FILE))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            lines.push(serde_json::from_str(&line)?);
        }
        if lines.len() != meta.counts.total() {
            return Err(DataError::Corpus(format!(
                "manifest has {} lines, metadata promises {}",
                lines.len(),
                meta.counts.total()
            )));
        }
        Ok(CorpusReader {
            dir: dir.to_path_buf(),
            meta,
            vocab,
            lines,
        })
    }

    pub fn manifest_lines(&self, split: Split) -> impl Iterator<Item = &ManifestLine> {
        let prefix = format!("{}-", split.as_str());
        self.lines.iter().filter(move |l| l.id.starts_with(&prefix))
    }

    /// Loads every sample of a split, pixels included.
    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedSample>, DataError> {
        let mut blob = Vec::new();
        File::open(self.dir.join(IMAGES_FILE))?.read_to_end(&mut blob)?;
        let mut out = Vec::new();
        for line in self.manifest_lines(split) {
            let len = line.shape.iter().product::<usize>();
            let start = line.byte_offset as usize;
            let end = start + len * 4;
            if end > blob.len() {
                return Err(DataError::Corpus(format!(
                    "sample {} points past the end of {}",
                    line.id, line.image_file
                )));
            }
            let image: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            out.push(LoadedSample {
                id: line.id.clone(),
                shape: line.shape,
                tokens: line.tokens.clone(),
                entities: line.entities.clone(),
                image,
            });
        }
        Ok(out)
    }
}

/// Re-derives the scene a manifest line was generated from. Ground truth for
/// tests; training code reads only the stored sample.
pub fn scene_of_line(meta: &CorpusMeta, line: &ManifestLine) -> Result<SceneSpec, DataError> {
    let (split, idx) = split_of_id(&line.id)?;
    Ok(sample_scene(&meta.config, meta.seed, split, idx))
}

fn split_of_id(id: &str) -> Result<(Split, usize), DataError> {
    let (name, idx) = id
        .rsplit_once('-')
        .ok_or_else(|| DataError::Corpus(format!("malformed sample id {:?}", id)))?;
    let split = Split::ALL
        .into_iter()
        .find(|s| s.as_str() == name)
        .ok_or_else(|| DataError::Corpus(format!("unknown split in id {:?}", id)))?;
    let idx = idx
        .parse::<usize>()
        .map_err(|_| DataError::Corpus(format!("malformed sample index in {:?}", id)))?;
    Ok((split, idx))
}
