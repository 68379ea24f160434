//! Checkpoint container: `manifest.json` plus little-endian `f32` blobs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `file`.
    pub offset: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `model` under `dir`, creating the directory if needed.
///
/// Values are stored as `f32`; a model with `f32` parameters round-trips
/// bit-exactly.
pub fn save_checkpoint<T: Real>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for t in model.params.tensors() {
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            dtype: "f32".to_string(),
            offset: blob.len() as u64,
            file: BLOB_FILE.to_string(),
        });
        for &v in t.data {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.spec.clone(),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut model = Model::<T>::init(manifest.model.clone(), 0)?;
    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let entries: HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if entries.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint("duplicate tensor names".to_string()));
    }
    let mut seen = 0;
    for t in model.params.tensors_mut() {
        let entry = entries
            .get(t.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                t.name, entry.shape, t.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, entry.dtype)));
        }
        if !blobs.contains_key(&entry.file) {
            if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
                return Err(Error::Checkpoint(format!("invalid blob file name {:?}", entry.file)));
            }
            blobs.insert(entry.file.clone(), fs::read(dir.join(&entry.file))?);
        }
        let bytes = &blobs[&entry.file];
        let start = entry.offset as usize;
        let end = start + 4 * t.data.len();
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("{}: blob is truncated", t.name)));
        }
        for (v, chunk) in t.data.iter_mut().zip(bytes[start..end].chunks_exact(4)) {
            *v = T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        seen += 1;
    }
    if seen != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {seen}",
            manifest.tensors.len()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VariantSpec;

    fn spec() -> ModelSpec {
        ModelSpec::new(VariantSpec::tiny().scaled(8, &[1, 1, 1, 1]).unwrap(), 4)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::init(spec(), 7).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back.spec, m.spec);
        for (a, b) in m.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::init(spec(), 1).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let mut expected = 0u64;
        for e in &manifest.tensors {
            assert_eq!(e.offset, expected);
            expected += 4 * e.shape.iter().product::<usize>() as u64;
        }
        let blob_len = fs::metadata(dir.path().join("params.bin")).unwrap().len();
        assert_eq!(blob_len, expected);
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::init(spec(), 1).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let path = dir.path().join("params.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Checkpoint(_))));
    }
}
