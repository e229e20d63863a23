//! On-disk parameter snapshots: `manifest.json` plus one `.f32g` array per
//! block. Values are stored as little-endian f32.

use std::fs;
use std::path::Path;

use phyrm_core::RawF32Grid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor4;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub global_step: u64,
    pub blocks: Vec<BlockEntry>,
    /// Free-form run metadata (schedule, model config, data location).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn json_err(path: &Path, source: serde_json::Error) -> Error {
    Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    global_step: u64,
    meta: serde_json::Value,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    let block_dir = dir.join("blocks");
    fs::create_dir_all(&block_dir).map_err(|e| io_err(&block_dir, e))?;
    let mut blocks = Vec::with_capacity(params.len());
    for b in params.blocks() {
        let file = format!("blocks/{}.f32g", b.name());
        let raw = RawF32Grid {
            height: 1,
            width: b.len() as u32,
            spacing: 1.0,
            values: b.value().data().iter().map(|&v| v as f32).collect(),
        };
        raw.write(dir.join(&file))?;
        blocks.push(BlockEntry {
            name: b.name().to_string(),
            shape: b.shape(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        global_step,
        blocks,
        meta,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| json_err(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "{}: checkpoint format {} unsupported",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_checkpoint_manifest(dir)?;
    let mut params = ModelParams::new();
    for entry in &manifest.blocks {
        let path = dir.join(&entry.file);
        let raw = RawF32Grid::read(&path)?;
        let values: Vec<f64> = raw.values.iter().map(|&v| v as f64).collect();
        let t = Tensor4::new(entry.shape, values).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        params.insert(entry.name.clone(), t)?;
    }
    Ok((params, manifest))
}
