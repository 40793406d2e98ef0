//! Single-file checkpoint container.
//!
//! Layout: 4-byte magic, u32 format version, u64 manifest length, a
//! JSON manifest (dtype, step, per-tensor metadata, free-form extra
//! section), then the raw little-endian tensor buffers in manifest
//! order. Every tensor carries a SHA-256 of its bytes so corruption
//! and silent drift are detectable.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGroup, ParamStore};
use crate::numerics::scalar::{Dtype, Scalar};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub frozen: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub step: u64,
    pub tensors: Vec<TensorMeta>,
    /// Free-form metadata (vocabulary, schema, configuration) that a
    /// loader needs to rebuild the surrounding model.
    pub extra: serde_json::Value,
}

pub struct LoadedCheckpoint<S: Scalar> {
    pub store: ParamStore<S>,
    pub step: u64,
    pub extra: serde_json::Value,
}

pub fn tensor_bytes<S: Scalar>(arr: &ArrayD<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(arr.len() * S::DTYPE.size_bytes());
    match arr.as_slice() {
        Some(flat) => S::write_le(flat, &mut out),
        None => {
            let flat: Vec<S> = arr.iter().copied().collect();
            S::write_le(&flat, &mut out);
        }
    }
    out
}

pub fn tensor_sha256<S: Scalar>(arr: &ArrayD<S>) -> String {
    let bytes = tensor_bytes(arr);
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn save<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    step: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blobs: Vec<Vec<u8>> = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let bytes = tensor_bytes(&p.value);
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        tensors.push(TensorMeta {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
            frozen: p.frozen,
            sha256: hex(&hasher.finalize()),
        });
        blobs.push(bytes);
    }
    let manifest = CheckpointManifest {
        dtype: S::DTYPE.name().to_string(),
        step,
        tensors,
        extra,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(manifest_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&manifest_json).map_err(io_err)?;
    for blob in &blobs {
        w.write_all(blob).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read only the manifest, without touching tensor data. Useful for
/// inspecting dtype and metadata before committing to an element type.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_manifest_from(&mut r, path)
}

fn read_manifest_from(r: &mut impl Read, path: &Path) -> Result<CheckpointManifest> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(io_err)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l).map_err(io_err)?;
    let len = u64::from_le_bytes(l) as usize;
    let mut manifest_json = vec![0u8; len];
    r.read_exact(&mut manifest_json).map_err(io_err)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    Dtype::parse(&manifest.dtype)?;
    Ok(manifest)
}

pub fn load<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let manifest = read_manifest_from(&mut r, path)?;
    if manifest.dtype != S::DTYPE.name() {
        return Err(Error::Incompatible(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            S::DTYPE.name()
        )));
    }
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut store = ParamStore::new();
    for meta in &manifest.tensors {
        let count: usize = meta.shape.iter().product();
        let mut bytes = vec![0u8; count * S::DTYPE.size_bytes()];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hex(&hasher.finalize());
        if digest != meta.sha256 {
            return Err(Error::Checkpoint(format!(
                "tensor {} does not match its recorded digest",
                meta.name
            )));
        }
        let vals = S::read_le(&bytes)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), vals)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", meta.name)))?;
        store.register(meta.name.clone(), arr, meta.group, meta.frozen)?;
    }
    // Trailing bytes mean the file does not match its manifest.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Checkpoint(
                "trailing bytes after last tensor".to_string(),
            ))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(LoadedCheckpoint {
        store,
        step: manifest.step,
        extra: manifest.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::{init_normal, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store
            .register(
                "enc.layer0.w",
                init_normal(&mut rng, &[4, 3], 0.1),
                ParamGroup::Graph,
                false,
            )
            .unwrap();
        store
            .register(
                "backbone.token_embed",
                init_normal(&mut rng, &[10, 3], 0.1),
                ParamGroup::Backbone,
                true,
            )
            .unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let extra = json!({"note": "fixture", "epoch": 3});
        save(&path, &store, 77, extra.clone()).unwrap();

        let loaded: LoadedCheckpoint<f32> = load(&path).unwrap();
        assert_eq!(loaded.step, 77);
        assert_eq!(loaded.extra, extra);
        assert_eq!(loaded.store.len(), store.len());
        for (id, p) in store.iter() {
            let q = loaded.store.get(loaded.store.id(&p.name).unwrap());
            assert_eq!(p.frozen, q.frozen);
            assert_eq!(p.group, q.group);
            assert_eq!(*p.value, *q.value, "tensor {} drifted", p.name);
            let _ = id;
        }
    }

    #[test]
    fn manifest_is_readable_without_dtype_knowledge() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_store(), 1, json!(null)).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.dtype, "f32");
        assert_eq!(m.tensors.len(), 2);
        assert_eq!(m.tensors[0].name, "enc.layer0.w");
        assert_eq!(m.tensors[0].shape, vec![4, 3]);
    }

    #[test]
    fn dtype_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_store(), 1, json!(null)).unwrap();
        let err = load::<f64>(&path).err().unwrap();
        assert!(matches!(err, Error::Incompatible(_)), "{err:?}");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_store(), 1, json!(null)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load::<f32>(&path).err().unwrap();
        assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn digest_matches_recomputation() {
        let store = sample_store();
        let (_, p) = store.iter().next().unwrap();
        let d1 = tensor_sha256(&p.value);
        let d2 = tensor_sha256(&p.value);
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 64);
    }
}
