//! Checkpoints: a JSON manifest plus a raw little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(blob)
}

/// Writes `<path>` (manifest) and `<path stem>.bin` (blob).
pub fn save(store: &ParamStore, path: &Path, meta: serde_json::Value) -> Result<Manifest> {
    let blob_name = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint")
    );
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let value = store.value(id);
        tensors.push(ManifestEntry {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            dtype: "f64".to_string(),
            byte_offset: bytes.len() as u64,
        });
        for x in value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: blob_name,
        tensors,
        meta,
    };
    fs::write(blob_path(path, &manifest.blob), &bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads every tensor in the checkpoint, in manifest order.
pub fn load(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    let bytes = fs::read(blob_path(path, &manifest.blob))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Validation(format!(
                "tensor `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + numel * 8;
        if end > bytes.len() {
            return Err(Error::Validation(format!("tensor `{}` runs past the blob", entry.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

/// Overwrites the values of an already-built store by parameter name.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<Manifest> {
    let (manifest, tensors) = load(path)?;
    if tensors.len() != store.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store.id(&name)?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::dim("checkpoint", store.value(id).shape(), t.shape()));
        }
        *store.value_mut(id) = t;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(9);
        store.insert_uniform("a.w", &[3, 4], 4).unwrap();
        store
            .insert("b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300, 1.0 / 3.0]))
            .unwrap();
        let path = dir.path().join("ckpt.json");
        save(&store, &path, serde_json::json!({"note": "x"})).unwrap();

        let mut other = ParamStore::new(1);
        other.insert_zeros("a.w", &[3, 4]).unwrap();
        other.insert_zeros("b", &[4]).unwrap();
        let manifest = load_into(&mut other, &path).unwrap();
        assert_eq!(manifest.meta["note"], "x");
        assert_eq!(manifest.tensors[1].byte_offset, 96);
        for id in store.ids() {
            let a: Vec<u64> = store.value(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = other.value(id).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(0);
        store.insert_zeros("w", &[2, 2]).unwrap();
        let path = dir.path().join("c.json");
        save(&store, &path, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new(0);
        other.insert_zeros("w", &[4]).unwrap();
        assert!(load_into(&mut other, &path).is_err());
    }
}
