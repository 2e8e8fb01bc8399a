//! Checkpoints: a JSON manifest naming every tensor with its shape and byte
//! offset, plus one raw little-endian f64 blob next to it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const FORMAT: &str = "uragate-checkpoint-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    blob: String,
    blob_bytes: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Blob path belonging to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` (JSON) and its blob. Tensor names must be unique.
pub fn save_checkpoint(
    manifest_path: &Path,
    config: serde_json::Value,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut seen = std::collections::BTreeSet::new();
    for (name, m) in tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        let offset = blob.len() as u64;
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
            bytes: (m.len() * 8) as u64,
        });
    }
    let blob_file = blob_path(manifest_path);
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        config,
        tensors: entries,
    };
    if let Some(parent) = manifest_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&blob_file, &blob)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a checkpoint back, validating every entry against the blob.
pub fn load_checkpoint(manifest_path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Matrix>)> {
    if !manifest_path.exists() {
        return Err(Error::MissingCheckpoint(manifest_path.to_path_buf()));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    let blob_file = manifest_path.with_file_name(&manifest.blob);
    if !blob_file.exists() {
        return Err(Error::MissingCheckpoint(blob_file));
    }
    let blob = fs::read(&blob_file)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut tensors = BTreeMap::new();
    for t in manifest.tensors {
        let [rows, cols] = t.shape;
        if t.bytes != (rows * cols * 8) as u64 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: {} bytes for shape {rows}x{cols}",
                t.name, t.bytes
            )));
        }
        let end = t.offset.checked_add(t.bytes).filter(|&e| e <= blob.len() as u64).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{}` extends past the blob", t.name))
        })?;
        let data = blob[t.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data)?;
        if tensors.insert(t.name.clone(), m).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
        }
    }
    Ok((manifest.config, tensors))
}
