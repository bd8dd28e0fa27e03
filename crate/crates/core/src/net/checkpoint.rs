//! Versioned binary checkpoint container.
//!
//! ```text
//! "TUTCKPT1"
//! u32 config_len, config_len bytes of `key = value` lines (model config)
//! u32 entry_count
//! entry_count × { u32 name_len, name, u8 dtype, u32 rank, rank × u64 dim, u64 offset }
//! payload: little-endian tensors, `offset` counted from the payload start
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64. Everything is little-endian.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TUTCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub config_text: String,
    pub entries: Vec<ManifestEntry>,
    /// Byte position of the payload in the file.
    pub payload_start: usize,
}

pub fn config_text(cfg: &ModelConfig) -> String {
    cfg.to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub fn parse_config_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("checkpoint config line {}: '{line}'", i + 1)))?;
        if !cfg.set(k.trim(), v.trim())? {
            return Err(Error::config(format!(
                "checkpoint config has unknown key '{}'",
                k.trim()
            )));
        }
    }
    Ok(cfg)
}

/// Serialises a model with f64 payloads.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = config_text(&model.config);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F64.code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.numel() * DType::F64.size()) as u64;
    }
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_manifest(bytes: &[u8]) -> std::result::Result<Manifest, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a TUTCKPT1 checkpoint".into());
    }
    let clen = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(clen)?)
        .map_err(|_| "config section is not UTF-8".to_string())?
        .to_string();
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(format!("unknown dtype code {other} for {name}")),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<_, _>>()?;
        let offset = r.u64()?;
        entries.push(ManifestEntry {
            name,
            shape,
            dtype,
            offset,
        });
    }
    Ok(Manifest {
        config_text,
        entries,
        payload_start: r.pos,
    })
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    parse_manifest(bytes).map_err(|m| Error::load("<checkpoint>", m))
}

/// Rebuilds a model, checking every tensor against the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let manifest = read_manifest(bytes)?;
    let config = parse_config_text(&manifest.config_text)?;
    let payload = &bytes[manifest.payload_start..];
    let mut params = ParamStore::default();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * e.dtype.size();
        let raw = payload.get(start..end).ok_or_else(|| {
            Error::load(
                "<checkpoint>",
                format!("payload of {} out of range", e.name),
            )
        })?;
        let data = match e.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Model::from_params(config, params).map_err(|e| Error::load("<checkpoint>", e.to_string()))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Loads a checkpoint; with `expected`, the stored model config must match it.
pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let model = from_bytes(&bytes).map_err(|e| match e {
        Error::Load { msg, .. } => Error::load(path, msg),
        other => Error::load(path, other.to_string()),
    })?;
    if let Some(exp) = expected {
        if exp != &model.config {
            let diffs: Vec<String> = exp
                .to_pairs()
                .into_iter()
                .zip(model.config.to_pairs())
                .filter(|(a, b)| a.1 != b.1)
                .map(|(a, b)| format!("{}: config {} vs checkpoint {}", a.0, a.1, b.1))
                .collect();
            return Err(Error::load(
                path,
                format!("model config mismatch ({})", diffs.join(", ")),
            ));
        }
    }
    Ok(model)
}
