//! Checkpoint directory: `manifest.json` lists `{name, dtype, shape,
//! byte_offset}` and `weights.bin` holds little-endian `f32` values
//! concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

pub fn save_checkpoint(store: &ParamStore<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    for (_, p) in store.iter() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            dtype: "f32".into(),
            shape: p.value.shape().to_vec(),
            byte_offset: bytes.len() as u64,
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join("weights.bin"), bytes)?;
    Ok(())
}

/// Loads values into `store`. Every parameter must be present with the
/// same shape, and the checkpoint may not carry extra entries.
pub fn load_checkpoint(store: &mut ParamStore<f32>, dir: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let bytes = fs::read(dir.join("weights.bin"))?;
    if manifest.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.len(),
            store.len()
        )));
    }
    for e in &manifest {
        if e.dtype != "f32" {
            return Err(TensorError::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let id = store.id(&e.name)?;
        let p = store.get_mut(id);
        if p.value.shape() != e.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "load_checkpoint",
                lhs: p.value.shape().to_vec(),
                rhs: e.shape.clone(),
            });
        }
        let n = p.value.numel();
        let start = e.byte_offset as usize;
        let end = start + 4 * n;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| TensorError::Checkpoint(format!("{}: weights.bin truncated", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.value = Tensor::new(e.shape.clone(), data)?;
    }
    Ok(())
}
