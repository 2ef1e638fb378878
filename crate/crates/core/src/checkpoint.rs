//! Checkpoint file format.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a
//! little-endian u64 header length, a JSON header, then the raw payload.
//! The header embeds the full model config plus the ordered parameter index
//! (name and shape per entry); the payload is each parameter's data as
//! little-endian f32 in header order. Loading validates every name and
//! shape against the model being restored and reports all mismatches at
//! once.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, PolypSegNet};
use crate::tensor::{Elem, Tensor};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<E: Elem>(model: &PolypSegNet<E>, path: &Path) -> Result<()> {
    let header = Header {
        model: model.cfg.clone(),
        params: model
            .store()
            .iter()
            .map(|(name, value)| ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header_json.len() + 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, value) in model.store().iter() {
        for v in value.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Restore a model at precision `E` from a checkpoint file.
pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<PolypSegNet<E>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;

    let expected_floats: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected_floats * 4 {
        return Err(Error::CheckpointFormat(format!(
            "payload holds {} bytes but the index declares {} floats",
            payload.len(),
            expected_floats
        )));
    }

    let mut model = build_model::<E>(header.model.clone(), 0)?;

    // Validate the complete index against the model before touching values,
    // collecting every mismatch.
    let mut mismatches = Vec::new();
    for entry in &header.params {
        match model.store().id_of(&entry.name) {
            None => mismatches.push(format!("  unexpected parameter {}", entry.name)),
            Some(id) => {
                let want = model.store().value(id).shape();
                if want != entry.shape.as_slice() {
                    mismatches.push(format!(
                        "  {}: checkpoint shape {:?}, model expects {:?}",
                        entry.name, entry.shape, want
                    ));
                }
            }
        }
    }
    let in_file: std::collections::BTreeSet<&str> =
        header.params.iter().map(|p| p.name.as_str()).collect();
    for name in model.store().names() {
        if !in_file.contains(name) {
            mismatches.push(format!("  missing parameter {name}"));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::CheckpointMismatch(mismatches.join("\n")));
    }

    let mut offset = 0;
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = [
                payload[offset],
                payload[offset + 1],
                payload[offset + 2],
                payload[offset + 3],
            ];
            data.push(E::from_f64(f32::from_le_bytes(raw) as f64));
            offset += 4;
        }
        model
            .store_mut()
            .set(&entry.name, Tensor::new(&entry.shape, data))
            .map_err(Error::CheckpointMismatch)?;
    }
    Ok(model)
}

/// Config embedded in a checkpoint, without restoring parameters.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; 20];
    file.read_exact(&mut prefix).map_err(|e| Error::io(path, e))?;
    if &prefix[..8] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let header_len = u64::from_le_bytes(prefix[12..20].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    Ok(header.model)
}

/// Serialize-and-write helper used by runs that record artifacts.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let body = serde_json::to_string_pretty(value)?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
