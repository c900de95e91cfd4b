//! Checkpoint files: a JSON manifest next to one little-endian `f64` blob.
//!
//! ```text
//! model.json   {"format_version": 1, "blob": "model.bin", "meta": {..},
//!               "entries": [{"name": .., "shape": [..], "offset": .., "len": ..}, ..]}
//! model.bin    entries back to back, offsets counted in values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct EntryRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    blob: String,
    meta: serde_json::Value,
    entries: Vec<EntryRecord>,
}

/// In-memory image of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>, meta: serde_json::Value) -> Self {
        Self { tensors, meta }
    }

    /// Saves to `path` (the manifest) and `path` with a `.bin` extension.
    /// The blob is renamed into place before the manifest, so a reader never
    /// sees a manifest that points at a missing or partial blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(EntryRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            blob: blob
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("model.bin")
                .to_string(),
            meta: self.meta.clone(),
            entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        write_atomic(&blob, &bytes)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: manifest.format_version,
            });
        }
        let blob = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let total: usize = manifest.entries.iter().map(|e| e.len).sum();
        if bytes.len() != total * 8 {
            return Err(Error::TruncatedBlob {
                file: blob,
                expected: total * 8,
                found: bytes.len(),
            });
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.entries {
            if e.offset + e.len > total {
                return Err(Error::Manifest(format!("entry `{}` runs past the blob", e.name)));
            }
            let data = bytes[e.offset * 8..(e.offset + e.len) * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        tensors.insert("a.b".into(), Tensor::vector(vec![0.1, 0.2]));
        Checkpoint::new(tensors, serde_json::json!({"step": 3}))
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.json");
        let p2 = dir.path().join("two.json");
        let ck = sample();
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, ck);
        back.save(&p2).unwrap();
        assert_eq!(fs::read(p1.with_extension("bin")).unwrap(), fs::read(p2.with_extension("bin")).unwrap());
        let m1 = fs::read_to_string(&p1).unwrap().replace("one.bin", "");
        let m2 = fs::read_to_string(&p2).unwrap().replace("two.bin", "");
        assert_eq!(m1, m2);
    }

    #[test]
    fn short_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        sample().save(&p).unwrap();
        let blob = p.with_extension("bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::TruncatedBlob { .. })));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        sample().save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
