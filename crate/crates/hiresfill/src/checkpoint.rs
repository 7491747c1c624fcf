//! Binary checkpoint container for refiner and feature-extractor weights.
//!
//! Layout: 8-byte magic, u32 little-endian header length, a JSON header,
//! then every tensor as little-endian f32 in header order.

use std::path::Path;

use hiresfill_core::features::{ExtractorConfig, FeatureExtractor};
use hiresfill_core::optim::{Adam, AdamConfig};
use hiresfill_core::shift::CHANNEL_ORDER_TAG;
use hiresfill_core::{RefinerConfig, RefinerModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"HRFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Refiner,
    Extractor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: Kind,
    pub config: serde_json::Value,
    pub channel_order: String,
    pub training_step: u64,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
}

/// A refiner with its optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RefinerModel<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub training_step: u64,
}

fn encode(kind: Kind, config: serde_json::Value, step: u64, tensors: &[(String, Vec<usize>, &[f32])], optimizer: Option<OptimizerHeader>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: data.len() });
        offset += data.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        config,
        channel_order: CHANNEL_ORDER_TAG.to_string(),
        training_step: step,
        tensors: entries,
        optimizer,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses and validates the container; returns the header and the flat data.
pub fn decode(bytes: &[u8], expected: Kind) -> Result<(Header, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {} (supported: {FORMAT_VERSION})", header.format_version)));
    }
    if header.channel_order != CHANNEL_ORDER_TAG {
        return Err(bad(format!("channel order {:?} does not match {:?}", header.channel_order, CHANNEL_ORDER_TAG)));
    }
    if header.kind != expected {
        return Err(bad(format!("expected a {expected:?} checkpoint, found {:?}", header.kind)));
    }
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let raw = &bytes[12 + len..];
    if raw.len() != total * 4 {
        return Err(bad(format!("tensor data is {} bytes, header declares {}", raw.len(), total * 4)));
    }
    for t in &header.tensors {
        if t.offset + t.len > total || t.shape.iter().product::<usize>() != t.len {
            return Err(bad(format!("tensor {} has an inconsistent table entry", t.name)));
        }
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, data))
}

pub fn encode_refiner(model: &RefinerModel<f32>, optimizer: Option<&Adam<f32>>, training_step: u64) -> Vec<u8> {
    let mut tensors = model.named_tensors();
    if let Some(opt) = optimizer {
        let shapes: Vec<Vec<usize>> = model.parameters().into_iter().map(|p| p.1).collect();
        for (i, m) in opt.m.iter().enumerate() {
            tensors.push((format!("adam.m.{i}"), shapes[i].clone(), m));
        }
        for (i, v) in opt.v.iter().enumerate() {
            tensors.push((format!("adam.v.{i}"), shapes[i].clone(), v));
        }
    }
    let config = serde_json::to_value(model.config()).expect("config serializes");
    let opt = optimizer.map(|o| OptimizerHeader { config: o.config, step: o.step });
    encode(Kind::Refiner, config, training_step, &tensors, opt)
}

pub fn decode_refiner(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, data) = decode(bytes, Kind::Refiner)?;
    let config: RefinerConfig = serde_json::from_value(header.config.clone()).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = RefinerModel::init(config, 0)?;
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.2.len()).collect();
    let mut optimizer = match &header.optimizer {
        Some(o) => {
            let mut adam = Adam::new(o.config, &sizes)?;
            adam.step = o.step;
            Some(adam)
        }
        None => None,
    };
    let expected = model.named_tensors().len() + if optimizer.is_some() { 2 * sizes.len() } else { 0 };
    if header.tensors.len() != expected {
        return Err(bad(format!("{} tensors stored, expected {expected}", header.tensors.len())));
    }
    for t in &header.tensors {
        let slice = &data[t.offset..t.offset + t.len];
        let moment = t.name.strip_prefix("adam.m.").map(|i| (true, i)).or_else(|| t.name.strip_prefix("adam.v.").map(|i| (false, i)));
        match (moment, optimizer.as_mut()) {
            (Some((first, idx)), Some(adam)) => {
                let i: usize = idx.parse().map_err(|_| bad(format!("bad tensor name {}", t.name)))?;
                let dst = if first { adam.m.get_mut(i) } else { adam.v.get_mut(i) };
                let dst = dst.ok_or_else(|| bad(format!("bad tensor name {}", t.name)))?;
                if dst.len() != slice.len() {
                    return Err(bad(format!("tensor {} has {} elements, expected {}", t.name, slice.len(), dst.len())));
                }
                dst.copy_from_slice(slice);
            }
            (Some(_), None) => return Err(bad(format!("optimizer tensor {} without optimizer header", t.name))),
            (None, _) => model.load_tensor(&t.name, slice).map_err(|e| bad(e.to_string()))?,
        }
    }
    Ok(Checkpoint { model, optimizer, training_step: header.training_step })
}

pub fn encode_extractor(fx: &FeatureExtractor<f32>) -> Vec<u8> {
    let config = serde_json::to_value(fx.config()).expect("config serializes");
    encode(Kind::Extractor, config, 0, &fx.named_tensors(), None)
}

pub fn decode_extractor(bytes: &[u8]) -> Result<FeatureExtractor<f32>> {
    let (header, data) = decode(bytes, Kind::Extractor)?;
    let config: ExtractorConfig = serde_json::from_value(header.config).map_err(|e| bad(format!("config: {e}")))?;
    let mut fx = FeatureExtractor::new(config)?;
    if header.tensors.len() != fx.named_tensors().len() {
        return Err(bad(format!("{} tensors stored, expected {}", header.tensors.len(), fx.named_tensors().len())));
    }
    for t in &header.tensors {
        fx.load_tensor(&t.name, &data[t.offset..t.offset + t.len]).map_err(|e| bad(e.to_string()))?;
    }
    Ok(fx)
}

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(path: &Path, model: &RefinerModel<f32>, optimizer: Option<&Adam<f32>>, training_step: u64) -> Result<()> {
    write_atomic(path, &encode_refiner(model, optimizer, training_step))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_refiner(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn save_extractor(path: &Path, fx: &FeatureExtractor<f32>) -> Result<()> {
    write_atomic(path, &encode_extractor(fx))
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor<f32>> {
    decode_extractor(&std::fs::read(path).map_err(io_err(path))?)
}

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Identifier of a checkpoint file: the hash of its bytes.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

/// Convenience for callers that only need default Adam state sizes.
pub fn fresh_optimizer(model: &RefinerModel<f32>, config: AdamConfig) -> Result<Adam<f32>> {
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.2.len()).collect();
    Ok(Adam::new(config, &sizes)?)
}
