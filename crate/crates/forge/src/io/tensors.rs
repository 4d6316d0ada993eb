//! Named tensor archives.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! mapping each tensor name to `{"dtype": "F32", "shape": [r, c],
//! "data_offsets": [begin, end]}` (offsets relative to the payload), then
//! the raw little-endian payload. An optional `__metadata__` entry holds
//! string key/value pairs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use expertforge_core::{ModelRecord, Tensor};
use serde_json::{json, Map, Value};

use crate::error::{ForgeError, Result};

const METADATA_KEY: &str = "__metadata__";
/// Metadata key holding the model id; falls back to the file stem.
pub const MODEL_ID_KEY: &str = "model_id";
pub const ARCHIVE_EXTENSION: &str = "safetensors";

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> ForgeError {
    ForgeError::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn as_usize_pair(v: &Value) -> Option<(u64, u64)> {
    let a = v.as_array()?;
    match a.as_slice() {
        [x, y] => Some((x.as_u64()?, y.as_u64()?)),
        _ => None,
    }
}

/// Decode an archive held in memory. `path` only labels errors.
pub fn decode_tensor_archive(path: &Path, bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    if bytes.len() < 8 {
        return Err(format_err(path, 0, "shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let payload_start = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| format_err(path, 0, format!("header length {header_len} exceeds file size")))?;
    let header: Value = serde_json::from_slice(&bytes[8..payload_start as usize])
        .map_err(|e| format_err(path, 8, format!("header is not JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| format_err(path, 8, "header is not a JSON object"))?;
    let payload = &bytes[payload_start as usize..];

    let mut meta = BTreeMap::new();
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, entry) in header {
        if name == METADATA_KEY {
            let m = entry
                .as_object()
                .ok_or_else(|| format_err(path, 8, "__metadata__ must be an object"))?;
            for (k, v) in m {
                let v = v
                    .as_str()
                    .ok_or_else(|| format_err(path, 8, format!("metadata {k:?} is not a string")))?;
                meta.insert(k.clone(), v.to_string());
            }
            continue;
        }
        let bad = |msg: String| format_err(path, 8, format!("tensor {name:?}: {msg}"));
        let dtype = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing dtype".into()))?;
        if dtype != "F32" {
            return Err(ForgeError::UnsupportedDtype {
                path: path.to_path_buf(),
                name: name.clone(),
                dtype: dtype.to_string(),
            });
        }
        let shape: Vec<u64> = entry
            .get("shape")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_u64).collect())
            .ok_or_else(|| bad("missing or non-integer shape".into()))?;
        let (rows, cols) = match shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(bad(format!("expected a 1-D or 2-D shape, got {shape:?}"))),
        };
        if rows == 0 || cols == 0 {
            return Err(bad(format!("empty shape {shape:?}")));
        }
        let (begin, end) = entry
            .get("data_offsets")
            .and_then(as_usize_pair)
            .ok_or_else(|| bad("missing data_offsets".into()))?;
        if begin > end || end > payload.len() as u64 {
            return Err(format_err(
                path,
                payload_start + begin,
                format!("tensor {name:?}: range [{begin}, {end}) outside payload of {} bytes", payload.len()),
            ));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("shape overflows".into()))?;
        if end - begin != expected {
            return Err(format_err(
                path,
                payload_start + begin,
                format!(
                    "tensor {name:?}: shape {shape:?} needs {expected} bytes, range holds {}",
                    end - begin
                ),
            ));
        }
        let data: Vec<f32> = payload[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        spans.push((begin, end, name.clone()));
        tensors.insert(
            name.clone(),
            Tensor::new(rows as usize, cols as usize, data).map_err(|source| ForgeError::Invalid {
                path: path.to_path_buf(),
                source,
            })?,
        );
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format_err(
                path,
                payload_start + w[1].0,
                format!("tensors {:?} and {:?} overlap", w[0].2, w[1].2),
            ));
        }
    }
    Ok((tensors, meta))
}

/// Encode tensors in name order with contiguous offsets. The header is
/// padded with spaces to a multiple of 8 bytes.
pub fn encode_tensor_archive(tensors: &BTreeMap<String, Tensor>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut header = Map::new();
    if !meta.is_empty() {
        header.insert(METADATA_KEY.into(), json!(meta));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        let len = t.data().len() * 4;
        header.insert(
            name.clone(),
            json!({
                "dtype": "F32",
                "shape": [t.rows(), t.cols()],
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_tensor_archive(path: &Path) -> Result<ModelRecord> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    let (tensors, meta) = decode_tensor_archive(path, &bytes)?;
    let model_id = meta.get(MODEL_ID_KEY).cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(ModelRecord {
        model_id,
        tensors,
        meta,
    })
}

/// Writes `record`, storing its id under [`MODEL_ID_KEY`].
pub fn write_tensor_archive(path: &Path, record: &ModelRecord) -> Result<()> {
    let mut meta = record.meta.clone();
    meta.insert(MODEL_ID_KEY.into(), record.model_id.clone());
    fs::write(path, encode_tensor_archive(&record.tensors, &meta)).map_err(|e| ForgeError::io(path, e))
}

/// Archive files of a bank directory, sorted by file name.
pub fn bank_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ForgeError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ARCHIVE_EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

/// Every archive in a bank directory. Model ids must be unique.
pub fn read_bank(dir: &Path) -> Result<Vec<ModelRecord>> {
    let mut bank = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in bank_files(dir)? {
        let rec = read_tensor_archive(&p)?;
        if !seen.insert(rec.model_id.clone()) {
            return Err(ForgeError::Conflict {
                path: p,
                id: rec.model_id,
            });
        }
        bank.push(rec);
    }
    if bank.is_empty() {
        return Err(ForgeError::Config(format!(
            "no .{ARCHIVE_EXTENSION} archives in {}",
            dir.display()
        )));
    }
    Ok(bank)
}
