//! Binary checkpoints: `EMRG`, format version (u32 LE), header length
//! (u32 LE), a UTF-8 JSON header, then little-endian f32 tensor payloads in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::{Head, Layer, ModelMeta, ParameterSet, Tensor};
use crate::training::{Expert, ExpertPool};

pub const MAGIC: &[u8; 4] = b"EMRG";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelEntry {
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val_accuracy: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    meta: ModelMeta,
    models: Vec<ModelEntry>,
    payload_bytes: usize,
    payload_crc32: u32,
}

/// What a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Params(ParameterSet),
    Pool(ExpertPool),
}

fn tensor_entries(p: &ParameterSet) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    for l in p.encoder() {
        out.push(TensorEntry { name: format!("{}.weight", l.name), shape: l.weights.shape().to_vec() });
        out.push(TensorEntry { name: format!("{}.bias", l.name), shape: l.bias.shape().to_vec() });
    }
    out.push(TensorEntry { name: "head.weight".into(), shape: p.head().weights.shape().to_vec() });
    if let Some(b) = &p.head().bias {
        out.push(TensorEntry { name: "head.bias".into(), shape: b.shape().to_vec() });
    }
    out
}

fn model_entry(role: &str, p: &ParameterSet, expert: Option<&Expert>) -> ModelEntry {
    ModelEntry {
        role: role.into(),
        domain_id: expert.map(|e| e.domain_id.clone()),
        val_loss: expert.map(|e| e.val_loss),
        val_accuracy: expert.map(|e| e.val_accuracy),
        tensors: tensor_entries(p),
    }
}

fn encode(kind: &str, models: Vec<(ModelEntry, &ParameterSet)>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (_, p) in &models {
        for t in p.tensors() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        kind: kind.into(),
        dtype: "f32le".into(),
        meta: *models[0].1.meta(),
        models: models.into_iter().map(|(m, _)| m).collect(),
        payload_bytes: payload.len(),
        payload_crc32: crc32fast::hash(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn encode_params(params: &ParameterSet) -> Result<Vec<u8>> {
    encode("parameter_set", vec![(model_entry("model", params, None), params)])
}

pub fn encode_pool(pool: &ExpertPool) -> Result<Vec<u8>> {
    let mut models = vec![(model_entry("init", &pool.shared_init, None), &pool.shared_init)];
    for e in &pool.experts {
        models.push((model_entry("expert", &e.params, Some(e)), &e.params));
    }
    encode("expert_pool", models)
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| fmt_err(bytes.len(), format!("truncated before byte {}", at + 4)))
}

fn rebuild(
    entry: &ModelEntry,
    activation: Activation,
    payload: &[u8],
    cursor: &mut usize,
    base: usize,
) -> Result<ParameterSet> {
    let mut tensors = Vec::with_capacity(entry.tensors.len());
    for t in &entry.tensors {
        let n: usize = t.shape.iter().product();
        let bytes = payload
            .get(*cursor..*cursor + 4 * n)
            .ok_or_else(|| fmt_err(base + payload.len(), format!("payload too short for tensor {}", t.name)))?;
        let data: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor =
            Tensor::new(t.shape.clone(), data).map_err(|e| fmt_err(base + *cursor, format!("{}: {e}", t.name)))?;
        *cursor += 4 * n;
        tensors.push((t.name.as_str(), tensor));
    }
    let at = base + *cursor;
    let mut encoder = Vec::new();
    let mut it = tensors.into_iter().peekable();
    while let Some((name, w)) = it.next() {
        let layer = name
            .strip_suffix(".weight")
            .ok_or_else(|| fmt_err(at, format!("expected a weight tensor, found {name}")))?;
        if layer == "head" {
            let bias = match it.next() {
                Some(("head.bias", b)) => Some(b),
                None => None,
                Some((other, _)) => return Err(fmt_err(at, format!("unexpected tensor {other} after head"))),
            };
            if it.peek().is_some() {
                return Err(fmt_err(at, "tensors after the head"));
            }
            return ParameterSet::new(encoder, Head { weights: w, bias }, activation)
                .map_err(|e| fmt_err(at, e.to_string()));
        }
        match it.next() {
            Some((b, bias)) if b.strip_suffix(".bias") == Some(layer) => {
                encoder.push(Layer { name: layer.to_string(), weights: w, bias });
            }
            _ => return Err(fmt_err(at, format!("missing bias for {layer}"))),
        }
    }
    Err(fmt_err(at, "model has no head"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic (expected EMRG)"));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(PREAMBLE..PREAMBLE + header_len)
        .ok_or_else(|| fmt_err(bytes.len(), format!("truncated header (declared {header_len} bytes)")))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| fmt_err(PREAMBLE + e.column(), e.to_string()))?;
    let base = PREAMBLE + header_len;
    let payload = &bytes[base..];
    if payload.len() != header.payload_bytes {
        return Err(fmt_err(
            base + payload.len().min(header.payload_bytes),
            format!("payload is {} bytes, header declares {}", payload.len(), header.payload_bytes),
        ));
    }
    let actual = crc32fast::hash(payload);
    if actual != header.payload_crc32 {
        return Err(Error::Checksum { expected: header.payload_crc32, actual });
    }
    if header.dtype != "f32le" {
        return Err(fmt_err(PREAMBLE, format!("unsupported dtype {}", header.dtype)));
    }
    let activation = header.meta.activation;
    let mut cursor = 0;
    let mut models = Vec::with_capacity(header.models.len());
    for m in &header.models {
        let p = rebuild(m, activation, payload, &mut cursor, base)?;
        if p.meta() != &header.meta {
            return Err(fmt_err(base + cursor, "model shape disagrees with header meta"));
        }
        models.push((m, p));
    }
    if cursor != payload.len() {
        return Err(fmt_err(base + cursor, "trailing payload bytes"));
    }
    match header.kind.as_str() {
        "parameter_set" if models.len() == 1 => Ok(Checkpoint::Params(models.pop().expect("one model").1)),
        "expert_pool" if !models.is_empty() && models[0].0.role == "init" => {
            let mut it = models.into_iter();
            let (_, init) = it.next().expect("init present");
            let experts = it
                .map(|(m, params)| {
                    if m.role != "expert" {
                        return Err(fmt_err(PREAMBLE, format!("unexpected role {}", m.role)));
                    }
                    Ok(Expert {
                        domain_id: m.domain_id.clone().unwrap_or_default(),
                        params,
                        val_loss: m.val_loss.unwrap_or(f64::NAN),
                        val_accuracy: m.val_accuracy.unwrap_or(f64::NAN),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ExpertPool::new(experts, init).map(Checkpoint::Pool)
        }
        other => Err(fmt_err(PREAMBLE, format!("bad checkpoint kind {other:?} for {} models", models.len()))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_params(params: &ParameterSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(params)?)
}

pub fn save_pool(pool: &ExpertPool, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pool(pool)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_pool(path: &Path) -> Result<ExpertPool> {
    match load_checkpoint(path)? {
        Checkpoint::Pool(p) => Ok(p),
        Checkpoint::Params(_) => Err(fmt_err(PREAMBLE, "checkpoint holds a single model, not a pool")),
    }
}

pub fn load_params(path: &Path) -> Result<ParameterSet> {
    match load_checkpoint(path)? {
        Checkpoint::Params(p) => Ok(p),
        Checkpoint::Pool(_) => Err(fmt_err(PREAMBLE, "checkpoint holds a pool, not a single model")),
    }
}
