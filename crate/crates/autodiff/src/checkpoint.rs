//! `VOXCAL01` checkpoint container.
//!
//! Layout: the 8 magic bytes, a little-endian u64 manifest length, the UTF-8
//! JSON manifest, then every tensor as raw little-endian f32. Manifest offsets
//! are byte offsets into that payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VOXCAL01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        tensors,
        meta: meta.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamSet, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut params = ParamSet::new();
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&e.name, Tensor::new(&e.shape, data)?)?;
    }
    Ok((params, manifest.meta))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
