//! Embedding matrices.
//!
//! Binary form: magic `EMB1`, little-endian `u32` row count, `u32` dim,
//! then `rows * dim` little-endian f32 values. Ids live in a sidecar file
//! at `<path>.ids`, one per line. A JSON-Lines form with one
//! `{"id": ..., "v": [...]}` object per line is also accepted on read.

use std::fs;
use std::path::{Path, PathBuf};

use expertforge_core::EmbeddingMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> ForgeError {
    ForgeError::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn invalid(path: &Path) -> impl FnOnce(expertforge_core::Error) -> ForgeError + '_ {
    move |source| ForgeError::Invalid {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> (Vec<u8>, String) {
    let mut bytes = Vec::with_capacity(12 + m.as_slice().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(m.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut ids = String::new();
    for id in m.ids() {
        ids.push_str(id);
        ids.push('\n');
    }
    (bytes, ids)
}

pub fn decode_embeddings(path: &Path, bytes: &[u8], ids_text: &str) -> Result<EmbeddingMatrix> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(format_err(path, 0, "missing EMB1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = rows as u64 * dim as u64 * 4;
    let actual = (bytes.len() - 12) as u64;
    if expected != actual {
        return Err(format_err(
            path,
            12,
            format!("{rows} rows x dim {dim} needs {expected} payload bytes, found {actual}"),
        ));
    }
    let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    if ids.len() != rows {
        return Err(ForgeError::Parse {
            path: ids_path(path),
            line: ids.len(),
            message: format!("{} ids for {rows} rows", ids.len()),
        });
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EmbeddingMatrix::new(ids, dim, values).map_err(invalid(path))
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    id: String,
    v: Vec<f32>,
}

pub fn parse_embeddings_jsonl(path: &Path, text: &str) -> Result<EmbeddingMatrix> {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(line).map_err(|e| ForgeError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match dim {
            None => dim = Some(row.v.len()),
            Some(d) if d != row.v.len() => {
                return Err(ForgeError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("vector of length {} where dim is {d}", row.v.len()),
                })
            }
            _ => {}
        }
        ids.push(row.id);
        values.extend(row.v);
    }
    EmbeddingMatrix::new(ids, dim.unwrap_or(0), values).map_err(invalid(path))
}

/// Reads either form, detected by the `EMB1` magic.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        let sidecar = ids_path(path);
        let ids = fs::read_to_string(&sidecar).map_err(|e| ForgeError::io(&sidecar, e))?;
        decode_embeddings(path, &bytes, &ids)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| {
            format_err(path, e.utf8_error().valid_up_to() as u64, "neither EMB1 nor UTF-8 JSON-Lines")
        })?;
        parse_embeddings_jsonl(path, &text)
    }
}

/// Writes the binary form plus its `.ids` sidecar.
pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let (bytes, ids) = encode_embeddings(m);
    fs::write(path, bytes).map_err(|e| ForgeError::io(path, e))?;
    let sidecar = ids_path(path);
    fs::write(&sidecar, ids).map_err(|e| ForgeError::io(&sidecar, e))
}

pub fn write_embeddings_jsonl(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut out = Vec::new();
    for (i, id) in m.ids().iter().enumerate() {
        serde_json::to_writer(
            &mut out,
            &JsonRow {
                id: id.clone(),
                v: m.row(i).to_vec(),
            },
        )
        .expect("row serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| ForgeError::io(path, e))
}
