//! Dataset directories: `meta.json` plus a little-endian `instances.bin`.
//!
//! `instances.bin` holds the training instances followed by the test
//! instances. Each record is `task u32, video u32, offset u32, T u32`, then
//! `T` action ids as u32, then `6 * feature_dim` f32 values (`v_start`
//! followed by `v_goal`, each 3 frames of `feature_dim`). Any pipeline that
//! emits this layout (e.g. converted real video features) can be loaded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{CorpusConfig, DatasetSplit, PlanInstance};
use super::video::FRAMES;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const INSTANCES_FILE: &str = "instances.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub horizon: Option<usize>,
    pub split_seed: u64,
    pub split_ratio: f64,
    pub instances_sha256: String,
    /// Generator settings when the data is synthetic.
    pub corpus: Option<CorpusConfig>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_instances(split: &DatasetSplit, feature_dim: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for inst in split.train.iter().chain(&split.test) {
        if inst.v_start.len() != FRAMES * feature_dim || inst.v_goal.len() != FRAMES * feature_dim {
            return Err(Error::LengthMismatch("instances disagree on feature_dim".into()));
        }
        for v in [inst.task, inst.video, inst.offset, inst.actions.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &a in &inst.actions {
            out.extend_from_slice(&(a as u32).to_le_bytes());
        }
        for &x in inst.v_start.iter().chain(&inst.v_goal) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn save_dataset(split: &DatasetSplit, dir: &Path, corpus: Option<&CorpusConfig>) -> Result<DatasetMeta> {
    fs::create_dir_all(dir)?;
    let feature_dim = split.feature_dim().unwrap_or(0);
    let bytes = encode_instances(split, feature_dim)?;
    let meta = DatasetMeta {
        format_version: DATASET_VERSION,
        n_train: split.train.len(),
        n_test: split.test.len(),
        feature_dim,
        horizon: split.horizon(),
        split_seed: split.seed,
        split_ratio: split.ratio,
        instances_sha256: sha256_hex(&bytes),
        corpus: corpus.cloned(),
    };
    write_atomic(&dir.join(INSTANCES_FILE), &bytes)?;
    write_atomic(&dir.join(META_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
    if meta.format_version != DATASET_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: DATASET_VERSION,
        });
    }
    Ok(meta)
}

/// Loads a dataset directory; the payload checksum is verified before any
/// instance is decoded.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetMeta)> {
    let meta = load_meta(dir)?;
    let path = dir.join(INSTANCES_FILE);
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != meta.instances_sha256 {
        return Err(Error::Checksum(path));
    }
    let fd = meta.feature_dim;
    let mut pos = 0usize;
    let bad = |detail: &str| Error::Format {
        path: path.clone(),
        detail: detail.to_string(),
    };
    let u32_at = |pos: &mut usize| -> Result<usize> {
        let s = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated record"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize)
    };
    let mut instances = Vec::with_capacity(meta.n_train + meta.n_test);
    for _ in 0..meta.n_train + meta.n_test {
        let task = u32_at(&mut pos)?;
        let video = u32_at(&mut pos)?;
        let offset = u32_at(&mut pos)?;
        let t = u32_at(&mut pos)?;
        let actions = (0..t).map(|_| u32_at(&mut pos)).collect::<Result<Vec<_>>>()?;
        let n = 2 * FRAMES * fd * 4;
        let raw = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated observations"))?;
        pos += n;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (s, g) = vals.split_at(FRAMES * fd);
        instances.push(PlanInstance {
            task,
            video,
            offset,
            actions,
            v_start: s.to_vec(),
            v_goal: g.to_vec(),
        });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let test = instances.split_off(meta.n_train);
    Ok((
        DatasetSplit {
            train: instances,
            test,
            seed: meta.split_seed,
            ratio: meta.split_ratio,
        },
        meta,
    ))
}
