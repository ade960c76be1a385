//! `TDML` embedding files.
//!
//! Layout: the magic bytes `TDML`, then little-endian `version: u32`,
//! `dim: u32`, `count: u64`, the label table (`u32` entry count, then per
//! label a `u32` byte length and UTF-8 bytes), then per record a `u32` label
//! index, a `u16` id byte length with the UTF-8 id, and `dim` IEEE-754
//! `f32` values.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::binary::{write_atomically, ByteReader, FormatKind};
use super::EmbeddingRecord;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TDML";
pub const EMBEDDING_VERSION: u32 = 1;

pub(crate) fn encode_embeddings(records: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut labels: Vec<&str> = Vec::new();
    let mut label_index: HashMap<&str, u32> = HashMap::new();
    let mut ids = HashSet::with_capacity(records.len());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::invalid(format!(
                "record {:?} has dimension {}, expected {dim}",
                r.id,
                r.vector.len()
            )));
        }
        if !ids.insert(r.id.as_str()) {
            return Err(Error::invalid(format!("duplicate record id {:?}", r.id)));
        }
        if r.id.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("record id of {} bytes is too long", r.id.len())));
        }
        if !label_index.contains_key(r.label.as_str()) {
            label_index.insert(&r.label, labels.len() as u32);
            labels.push(&r.label);
        }
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;

    let mut out = Vec::with_capacity(24 + records.len() * (8 + 4 * dim));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in &labels {
        out.extend_from_slice(&(l.len() as u32).to_le_bytes());
        out.extend_from_slice(l.as_bytes());
    }
    for r in records {
        out.extend_from_slice(&label_index[r.label.as_str()].to_le_bytes());
        out.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        for &v in &r.vector {
            let v32 = v as f32;
            if !v32.is_finite() {
                return Err(Error::invalid(format!("record {:?}: value {v} is not representable as f32", r.id)));
            }
            out.extend_from_slice(&v32.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode_embeddings(bytes: &[u8]) -> Result<Vec<EmbeddingRecord>> {
    let mut rd = ByteReader::new(bytes, FormatKind::Embeddings);
    if rd.take(4, "magic")? != EMBEDDING_MAGIC {
        return Err(rd.error_at(0, "bad magic, not a TDML embedding file"));
    }
    let version = rd.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(rd.error_at(4, format!("unsupported version {version}")));
    }
    let dim = rd.u32("dimension")? as usize;
    let count = rd.u64("record count")?;
    let n_labels = rd.u32("label count")? as usize;
    let mut labels = Vec::with_capacity(n_labels.min(rd.remaining() / 4));
    for _ in 0..n_labels {
        let len = rd.u32("label length")? as usize;
        labels.push(rd.utf8(len, "label")?);
    }

    let min_record = 6 + 4 * dim;
    let capacity = (count as usize).min(rd.remaining() / min_record.max(1));
    let mut records = Vec::with_capacity(capacity);
    let mut ids = HashSet::with_capacity(capacity);
    for _ in 0..count {
        let start = rd.offset();
        let label_idx = rd.u32("label index")? as usize;
        let label = labels
            .get(label_idx)
            .ok_or_else(|| rd.error_at(start, format!("label index {label_idx} out of range ({} labels)", labels.len())))?
            .clone();
        let id_len = rd.u16("id length")? as usize;
        let id_start = rd.offset();
        let id = rd.utf8(id_len, "record id")?;
        if !ids.insert(id.clone()) {
            return Err(rd.error_at(id_start, format!("duplicate record id {id:?}")));
        }
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = rd.offset();
            let v = rd.f32("feature value")?;
            if !v.is_finite() {
                return Err(rd.error_at(at, "non-finite feature value"));
            }
            vector.push(v as f64);
        }
        records.push(EmbeddingRecord { id, label, vector });
    }
    rd.finish("the last record")?;
    Ok(records)
}

/// Writes records to a `TDML` file. All vectors must share one length and
/// ids must be unique.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let bytes = encode_embeddings(records)?;
    write_atomically(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}
