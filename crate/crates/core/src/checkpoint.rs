//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `BAYESCKP`, a `u32` format version, a `u64`
//! metadata length, the JSON metadata, then 32-bit little-endian floats.
//! Metadata offsets are byte offsets into that float payload, which holds
//! the tensors back to back in directory order. Every integer is little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BayesSlot, LayerBayesFlags, LayerKind, ModelConfig, ParameterSet, Slot, SlotValue};
use crate::numerics::{Element, Tensor};
use crate::schedule::{DepthIndex, PriorScale, ScheduleConfig};

pub const MAGIC: &[u8; 8] = b"BAYESCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    Det,
    Bayes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Value,
    Mu,
    Rho,
    PriorMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub role: TensorRole,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    pub name: String,
    pub layer: LayerKind,
    pub kind: SlotKind,
    pub shape: Vec<usize>,
    pub depth: Option<DepthIndex>,
    pub prior: Option<PriorScale>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub flags: Option<LayerBayesFlags>,
    pub schedule: Option<ScheduleConfig>,
    pub slots: Vec<SlotEntry>,
}

pub fn to_bytes<T: Element>(params: &ParameterSet<T>) -> Result<Vec<u8>> {
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |role, t: &Tensor<T>| {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        TensorEntry {
            role,
            offset,
            bytes: payload.len() as u64 - offset,
        }
    };
    let slots = params
        .slots()
        .iter()
        .map(|s| {
            let (kind, prior, tensors) = match &s.value {
                SlotValue::Deterministic(t) => (SlotKind::Det, None, vec![push(TensorRole::Value, t)]),
                SlotValue::Bayesian(b) => (
                    SlotKind::Bayes,
                    Some(b.prior),
                    vec![
                        push(TensorRole::Mu, &b.mu),
                        push(TensorRole::Rho, &b.rho),
                        push(TensorRole::PriorMean, &b.prior_mean),
                    ],
                ),
            };
            SlotEntry {
                name: s.name.clone(),
                layer: s.layer,
                kind,
                shape: s.value.shape().to_vec(),
                depth: s.depth,
                prior,
                tensors,
            }
        })
        .collect();
    let meta = Metadata {
        config: params.config,
        vocab: params.vocab.clone(),
        flags: params.flags,
        schedule: params.schedule,
        slots,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Parses the header and metadata; returns them with the float payload.
pub fn read_metadata(bytes: &[u8]) -> Result<(Metadata, &[u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(format_err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let json_end = usize::try_from(json_len)
        .ok()
        .and_then(|n| HEADER_LEN.checked_add(n))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err("metadata length exceeds file size"))?;
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..json_end])?;
    Ok((meta, &bytes[json_end..]))
}

fn read_tensor<T: Element>(payload: &[u8], entry: &TensorEntry, shape: &[usize], cursor: &mut u64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if entry.offset != *cursor {
        return Err(format_err(format!(
            "tensor at offset {} overlaps or leaves a gap (expected {})",
            entry.offset, cursor
        )));
    }
    if entry.bytes != 4 * n as u64 {
        return Err(format_err(format!("tensor of shape {shape:?} declared with {} bytes", entry.bytes)));
    }
    let end = entry.offset + entry.bytes;
    if end > payload.len() as u64 {
        return Err(format_err("tensor extends past the end of the file"));
    }
    *cursor = end;
    let data = payload[entry.offset as usize..end as usize]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<ParameterSet<T>> {
    let (meta, payload) = read_metadata(bytes)?;
    let mut cursor = 0u64;
    let mut slots = Vec::with_capacity(meta.slots.len());
    for s in &meta.slots {
        let roles: Vec<TensorRole> = s.tensors.iter().map(|t| t.role).collect();
        let mut tensors = Vec::with_capacity(s.tensors.len());
        for entry in &s.tensors {
            tensors.push(read_tensor::<T>(payload, entry, &s.shape, &mut cursor)?);
        }
        let value = match (s.kind, roles.as_slice(), s.prior) {
            (SlotKind::Det, [TensorRole::Value], None) => SlotValue::Deterministic(tensors.remove(0)),
            (SlotKind::Bayes, [TensorRole::Mu, TensorRole::Rho, TensorRole::PriorMean], Some(prior)) => {
                let mut it = tensors.into_iter();
                SlotValue::Bayesian(BayesSlot {
                    mu: it.next().expect("mu"),
                    rho: it.next().expect("rho"),
                    prior_mean: it.next().expect("prior mean"),
                    prior,
                })
            }
            _ => return Err(format_err(format!("slot {} has an inconsistent directory entry", s.name))),
        };
        slots.push(Slot {
            name: s.name.clone(),
            layer: s.layer,
            depth: s.depth,
            value,
        });
    }
    if cursor != payload.len() as u64 {
        return Err(format_err(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - cursor
        )));
    }
    ParameterSet::from_slots(meta.config, meta.vocab, meta.flags, meta.schedule, slots)
}

pub fn save<T: Element>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParameterSet<T>> {
    from_bytes(&fs::read(path)?)
}
