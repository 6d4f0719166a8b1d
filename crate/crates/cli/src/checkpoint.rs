//! Checkpoint file format and the stage-transfer rule.
//!
//! Layout: 5-byte magic, little-endian u64 header length, JSON header,
//! then the raw parameter payload. The header lists every parameter as
//! {name, shape, byte_offset} in name order; the payload is little-endian
//! 32-bit floats in exactly that order. Saving a loaded checkpoint must
//! reproduce the original file byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use strata_model::ModelConfig;
use strata_tensor::{ParamStore, Tensor};

use crate::{cfg_err, Result};

pub const MAGIC: &[u8; 5] = b"HTSC1";
pub const STAGE_ONE: u8 = 1;
pub const STAGE_TWO: u8 = 2;

/// Parameter name prefixes copied verbatim from a first-stage checkpoint
/// into a second-stage store. Everything else starts fresh.
pub const SHARED_PREFIXES: [&str; 2] = ["enc.", "dec."];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    stage: u8,
    config_hash: String,
    model: ModelConfig,
    use_vdm: bool,
    use_ldm: bool,
    entries: Vec<Entry>,
}

/// A checkpoint loaded back into memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: u8,
    pub config_hash: String,
    pub model: ModelConfig,
    pub use_vdm: bool,
    pub use_ldm: bool,
    pub params: ParamStore<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    stage: u8,
    config_hash: &str,
    model: &ModelConfig,
    use_vdm: bool,
    use_ldm: bool,
    params: &ParamStore<f32>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut byte_offset = 0u64;
    for name in params.names() {
        let t = params.get(name).expect("name comes from the store");
        entries.push(Entry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            byte_offset,
        });
        byte_offset += (t.rows() * t.cols() * 4) as u64;
    }
    let header = Header {
        stage,
        config_hash: config_hash.to_string(),
        model: model.clone(),
        use_vdm,
        use_ldm,
        entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut f = fs::File::create(path)
        .map_err(|e| cfg_err(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for entry in &header.entries {
        let t = params.get(&entry.name).expect("entry mirrors the store");
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)
        .map_err(|e| cfg_err(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 5];
    f.read_exact(&mut magic)
        .map_err(|e| cfg_err(format!("{}: truncated magic: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(cfg_err(format!(
            "{}: not a checkpoint (bad magic {:?})",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|e| cfg_err(format!("{}: truncated header length: {e}", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|e| cfg_err(format!("{}: truncated header: {e}", path.display())))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| cfg_err(format!("{}: header: {e}", path.display())))?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let expected: u64 = header
        .entries
        .iter()
        .map(|e| (e.shape[0] * e.shape[1] * 4) as u64)
        .sum();
    if payload.len() as u64 != expected {
        return Err(cfg_err(format!(
            "{}: payload holds {} bytes, header describes {}",
            path.display(),
            payload.len(),
            expected
        )));
    }

    let mut params = ParamStore::new(0);
    let mut seen = std::collections::BTreeSet::new();
    for entry in &header.entries {
        if !seen.insert(entry.name.clone()) {
            return Err(cfg_err(format!(
                "{}: parameter {} appears twice",
                path.display(),
                entry.name
            )));
        }
        let n = entry.shape[0] * entry.shape[1];
        let start = entry.byte_offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(cfg_err(format!(
                "{}: {} overruns the payload",
                path.display(),
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(entry.shape[0], entry.shape[1], data)
            .map_err(|e| cfg_err(format!("{}: {}: {e}", path.display(), entry.name)))?;
        params.set(&entry.name, t);
    }

    Ok(Checkpoint {
        stage: header.stage,
        config_hash: header.config_hash,
        model: header.model,
        use_vdm: header.use_vdm,
        use_ldm: header.use_ldm,
        params,
    })
}

/// Copies every shared-prefix parameter of `into` from `from`, bitwise.
/// Returns how many tensors moved. Every shared name must exist in the
/// source with the same shape; the error lists all missing names at once.
pub fn transfer_shared(from: &ParamStore<f32>, into: &mut ParamStore<f32>) -> Result<usize> {
    let shared: Vec<String> = into
        .names()
        .filter(|n| SHARED_PREFIXES.iter().any(|p| n.starts_with(p)))
        .map(String::from)
        .collect();
    let missing: Vec<&String> = shared.iter().filter(|n| from.get(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(cfg_err(format!(
            "checkpoint is missing {} shared parameter(s): {}",
            missing.len(),
            missing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    for name in &shared {
        let src = from.get(name).expect("checked above");
        let dst = into.get(name).expect("name comes from the store");
        if src.shape() != dst.shape() {
            return Err(cfg_err(format!(
                "{name}: checkpoint shape {:?} does not match the model's {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        into.set(name, src.clone());
    }
    Ok(shared.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use strata_model::{Model, StageTwoParts};

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d = 8;
        c.heads = 2;
        c.enc_layers = 1;
        c.dec_layers = 1;
        c.image_h = 16;
        c.image_w = 16;
        c.vocab = 16;
        c.n_max = 8;
        c.num_entities = 3;
        c.num_positions = 4;
        c.eclo_negatives = 2;
        c.vdm_k = 2;
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny_cfg();
        let model = Model::stage1(cfg.clone()).unwrap();
        let store = model.new_store::<f32>(9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.htsc");
        let p2 = dir.path().join("b.htsc");
        save_checkpoint(&p1, STAGE_ONE, "hash", &cfg, false, false, &store).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.stage, STAGE_ONE);
        assert_eq!(loaded.config_hash, "hash");
        assert_eq!(loaded.model, cfg);
        save_checkpoint(
            &p2,
            loaded.stage,
            &loaded.config_hash,
            &loaded.model,
            loaded.use_vdm,
            loaded.use_ldm,
            &loaded.params,
        )
        .unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn every_parameter_survives_the_round_trip_bitwise() {
        let cfg = tiny_cfg();
        let model = Model::stage2(cfg.clone(), StageTwoParts::both()).unwrap();
        let store = model.new_store::<f32>(11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.htsc");
        save_checkpoint(&p, STAGE_TWO, "h", &cfg, true, true, &store).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, loaded.params.names().collect::<Vec<_>>());
        for name in names {
            let a = store.get(name).unwrap();
            let b = loaded.params.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name} changed across the round trip");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.htsc");
        fs::write(&p, b"NOTCKPTxxxxxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn transfer_copies_shared_names_and_lists_missing_ones() {
        let cfg = tiny_cfg();
        let s1 = Model::stage1(cfg.clone()).unwrap();
        let s2 = Model::stage2(cfg.clone(), StageTwoParts::both()).unwrap();
        let from = s1.new_store::<f32>(1).unwrap();
        let mut into = s2.new_store::<f32>(2).unwrap();
        let n = transfer_shared(&from, &mut into).unwrap();
        assert!(n > 10);
        for name in into.names() {
            let dst = into.get(name).unwrap();
            if SHARED_PREFIXES.iter().any(|p| name.starts_with(p)) {
                let src = from.get(name).unwrap();
                assert_eq!(
                    src.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    dst.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "{name} not copied bitwise"
                );
            }
        }

        // A gutted source must name every absent parameter.
        let mut gutted = ParamStore::<f32>::new(0);
        for name in from.names() {
            if !name.starts_with("enc.vis.patch") {
                gutted.set(name, from.get(name).unwrap().clone());
            }
        }
        let mut into2 = s2.new_store::<f32>(3).unwrap();
        let err = transfer_shared(&gutted, &mut into2).unwrap_err();
        assert!(err.to_string().contains("enc.vis.patch.w"), "{err}");
    }
}
