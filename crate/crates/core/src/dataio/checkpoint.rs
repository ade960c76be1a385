//! Versioned checkpoint container.
//!
//! `TDCK`, `version: u32`, `section count: u32`, then per section a 4-byte
//! tag, a `u64` payload length and the payload. Sections: `CONF` (model
//! configuration), `PARM` (parameters as `f64`) and optionally `PCA0`.
//! All integers are little-endian.

use std::path::Path;

use super::binary::{write_atomically, ByteReader, FormatKind};
use crate::error::{Error, Result};
use crate::model::{InputKind, ModelConfig, ParamSet};
use crate::numerics::Matrix;
use crate::reduce::PcaModel;

const MAGIC: &[u8; 4] = b"TDCK";
const VERSION: u32 = 1;
const TAG_CONFIG: &[u8; 4] = b"CONF";
const TAG_PARAMS: &[u8; 4] = b"PARM";
const TAG_PCA: &[u8; 4] = b"PCA0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub pca: Option<PcaModel>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_config(config: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (kind, width) = match config.input {
        InputKind::Vector { dim } => (0u8, dim),
        InputKind::Map { channels } => (1u8, channels),
    };
    out.push(kind);
    put_u32(&mut out, width)?;
    out.push(u8::from(config.conv_channels.is_some()));
    put_u32(&mut out, config.conv_channels.unwrap_or(0))?;
    put_u32(&mut out, config.dense_dims.len())?;
    for &d in &config.dense_dims {
        put_u32(&mut out, d)?;
    }
    out.push(u8::from(config.fc_reduction.is_some()));
    put_u32(&mut out, config.fc_reduction.unwrap_or(0))?;
    Ok(out)
}

fn decode_flag(rd: &mut ByteReader<'_>, what: &str) -> Result<bool> {
    let at = rd.offset();
    match rd.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(rd.error_at(at, format!("{what} flag has invalid value {other}"))),
    }
}

fn decode_config(rd: &mut ByteReader<'_>) -> Result<ModelConfig> {
    let start = rd.offset();
    let kind_at = rd.offset();
    let kind = rd.u8("input kind")?;
    let width = rd.u32("input width")? as usize;
    let input = match kind {
        0 => InputKind::Vector { dim: width },
        1 => InputKind::Map { channels: width },
        other => return Err(rd.error_at(kind_at, format!("unknown input kind {other}"))),
    };
    let has_conv = decode_flag(rd, "convolution")?;
    let conv = rd.u32("convolution channels")? as usize;
    let n_dense = rd.u32("dense layer count")? as usize;
    if n_dense > rd.remaining() / 4 {
        return Err(rd.error(format!("dense layer count {n_dense} exceeds section size")));
    }
    let dense_dims = (0..n_dense)
        .map(|_| rd.u32("dense width").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let has_fc = decode_flag(rd, "reduction")?;
    let fc = rd.u32("reduction width")? as usize;
    let config = ModelConfig {
        input,
        conv_channels: has_conv.then_some(conv),
        dense_dims,
        fc_reduction: has_fc.then_some(fc),
    };
    config
        .validate()
        .map_err(|e| rd.error_at(start, format!("invalid model configuration: {e}")))?;
    Ok(config)
}

fn encode_pca(pca: &PcaModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_u32(&mut out, pca.input_dim())?;
    put_u32(&mut out, pca.output_dim())?;
    put_f64s(&mut out, pca.mean());
    put_f64s(&mut out, pca.components().as_slice());
    put_f64s(&mut out, pca.eigenvalues());
    Ok(out)
}

fn decode_pca(rd: &mut ByteReader<'_>) -> Result<PcaModel> {
    let start = rd.offset();
    let d = rd.u32("PCA input dimension")? as usize;
    let k = rd.u32("PCA output dimension")? as usize;
    let needed = (d + k * d + k).saturating_mul(8);
    if needed != rd.remaining() {
        return Err(rd.error(format!("PCA section holds {} bytes, shape {k}x{d} needs {needed}", rd.remaining())));
    }
    let mut read = |n: usize, what: &str| (0..n).map(|_| rd.f64(what)).collect::<Result<Vec<f64>>>();
    let mean = read(d, "PCA mean")?;
    let components = read(k * d, "PCA components")?;
    let eigenvalues = read(k, "PCA eigenvalues")?;
    let components = Matrix::from_vec(k, d, components).map_err(|e| rd.error_at(start, e.to_string()))?;
    PcaModel::from_parts(mean, components, eigenvalues).map_err(|e| rd.error_at(start, e.to_string()))
}

pub(crate) fn encode_checkpoint(params: &ParamSet, pca: Option<&PcaModel>) -> Result<Vec<u8>> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
    sections.push((TAG_CONFIG, encode_config(params.config())?));
    let mut parm = Vec::with_capacity(8 + 8 * params.len());
    parm.extend_from_slice(&(params.len() as u64).to_le_bytes());
    put_f64s(&mut parm, params.values());
    sections.push((TAG_PARAMS, parm));
    if let Some(p) = pca {
        sections.push((TAG_PCA, encode_pca(p)?));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

pub(crate) fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = ByteReader::new(bytes, FormatKind::Checkpoint);
    if rd.take(4, "magic")? != MAGIC {
        return Err(rd.error_at(0, "bad magic, not a checkpoint file"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(rd.error_at(4, format!("unsupported checkpoint version {version}")));
    }
    let count = rd.u32("section count")?;

    let mut config = None;
    let mut values: Option<(u64, Vec<f64>)> = None;
    let mut pca = None;
    for _ in 0..count {
        let tag_at = rd.offset();
        let tag: [u8; 4] = rd.take(4, "section tag")?.try_into().unwrap();
        let len = rd.u64("section length")?;
        let len = usize::try_from(len).map_err(|_| rd.error("section length overflows"))?;
        let mut sec = rd.sub(len, "section payload")?;
        let duplicate = || rd.error_at(tag_at, format!("duplicate section {:?}", String::from_utf8_lossy(&tag)));
        match &tag {
            TAG_CONFIG => {
                if config.is_some() {
                    return Err(duplicate());
                }
                config = Some(decode_config(&mut sec)?);
            }
            TAG_PARAMS => {
                if values.is_some() {
                    return Err(duplicate());
                }
                let at = sec.offset();
                let n = sec.u64("parameter count")?;
                if n.saturating_mul(8) != sec.remaining() as u64 {
                    return Err(sec.error(format!(
                        "parameter section declares {n} values but holds {} bytes",
                        sec.remaining()
                    )));
                }
                let v = (0..n).map(|_| sec.f64("parameter")).collect::<Result<Vec<_>>>()?;
                values = Some((at, v));
            }
            TAG_PCA => {
                if pca.is_some() {
                    return Err(duplicate());
                }
                pca = Some(decode_pca(&mut sec)?);
            }
            _ => {
                return Err(rd.error_at(tag_at, format!("unknown section {:?}", String::from_utf8_lossy(&tag))));
            }
        }
        sec.finish("section")?;
    }
    rd.finish("the last section")?;

    let config = config.ok_or_else(|| rd.error("missing CONF section"))?;
    let (params_at, values) = values.ok_or_else(|| rd.error("missing PARM section"))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(rd.error_at(params_at, "non-finite parameter value"));
    }
    let params = ParamSet::unflatten(&config, &values).map_err(|e| rd.error_at(params_at, e.to_string()))?;
    Ok(Checkpoint { params, pca })
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, pca: Option<&PcaModel>) -> Result<()> {
    write_atomically(path, &encode_checkpoint(params, pca)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
