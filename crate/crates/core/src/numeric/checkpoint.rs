//! Checkpoint files: a JSON manifest (name, shape, byte offset) followed by a
//! flat little-endian f64 blob. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STRMCKPT";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn save(
    path: &Path,
    tensors: &[(String, &Tensor)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        entries,
        meta: meta.clone(),
    })?;

    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load every tensor plus the metadata map. Tensors come back as plain
/// (untracked) leaves; callers re-mark parameters as needed.
pub fn load(path: &Path) -> Result<(Vec<(String, Tensor)>, BTreeMap<String, String>)> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut mbuf = vec![0u8; mlen];
    f.read_exact(&mut mbuf)?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;

    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "entry {} overruns blob ({} > {})",
                e.name,
                end,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::new(data, &e.shape)?));
    }
    Ok((out, manifest.meta))
}
