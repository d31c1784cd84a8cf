//! Checkpoint files: a JSON manifest followed by one flat little-endian payload.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! manifest, then the payload. Real tensors are `f64`; integer weight codes
//! of the quantized branch are `i32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{BranchSet, HybridModel, ModelSettings};

pub const MAGIC: &[u8; 8] = b"HYBREPCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    I32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateEntry {
    pub name: String,
    pub seed: u64,
    pub tau: f64,
    /// Position of the noise generator, as a decimal string (128-bit).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: Architecture,
    pub settings: ModelSettings,
    pub branches: BranchSet,
    pub seed: u64,
    pub frozen: bool,
    pub tensors: Vec<TensorEntry>,
    pub gates: Vec<GateEntry>,
    pub payload_bytes: usize,
}

fn codes_name(layer: &str) -> String {
    format!("quant.{layer}.weight.codes")
}

/// Manifest and payload of `model`.
pub fn encode(model: &HybridModel) -> Result<(Manifest, Vec<u8>)> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut copy = model.clone();
    for (name, shape, data) in copy.state_mut() {
        let offset = payload.len();
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: Dtype::F64,
            offset,
            len: payload.len() - offset,
        });
    }
    for (layer, codes) in model.weight_codes()? {
        let offset = payload.len();
        for c in &codes.codes {
            payload.extend_from_slice(&c.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: codes_name(&layer),
            shape: codes.shape.clone(),
            dtype: Dtype::I32,
            offset,
            len: payload.len() - offset,
        });
    }
    let gates = model
        .gates()
        .into_iter()
        .map(|(name, g)| GateEntry {
            name,
            seed: g.seed(),
            tau: g.tau,
            word_pos: g.rng_word_pos().to_string(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        settings: model.settings.clone(),
        branches: model.branches,
        seed: model.seed,
        frozen: model.is_frozen(),
        tensors,
        gates,
        payload_bytes: payload.len(),
    };
    Ok((manifest, payload))
}

pub fn to_bytes(model: &HybridModel) -> Result<Vec<u8>> {
    let (manifest, payload) = encode(model)?;
    let json = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Bytes of everything the quantized branch owns: weights, intervals,
/// batchnorm state and integer codes, in manifest order.
pub fn quant_branch_bytes(model: &HybridModel) -> Result<Vec<u8>> {
    let (manifest, payload) = encode(model)?;
    let mut out = Vec::new();
    for t in manifest.tensors.iter().filter(|t| t.name.starts_with("quant.") || t.name.starts_with("head.input.")) {
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&payload[t.offset..t.offset + t.len]);
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<HybridModel> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::PayloadLength {
            expected: HEADER_LEN,
            found: bytes.len(),
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < mlen {
        return Err(CheckpointError::PayloadLength {
            expected: HEADER_LEN + mlen,
            found: bytes.len(),
        }
        .into());
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let payload = &body[mlen..];
    if payload.len() != manifest.payload_bytes {
        return Err(CheckpointError::PayloadLength {
            expected: manifest.payload_bytes,
            found: payload.len(),
        }
        .into());
    }
    decode(&manifest, payload)
}

fn disagree(msg: String) -> Error {
    CheckpointError::ManifestPayload(msg).into()
}

/// Rebuilds a model from a manifest and its payload.
pub fn decode(manifest: &Manifest, payload: &[u8]) -> Result<HybridModel> {
    let mut model = HybridModel::new(
        manifest.arch.clone(),
        manifest.settings.clone(),
        manifest.branches,
        manifest.seed,
    )
    .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let find = |name: &str| manifest.tensors.iter().find(|t| t.name == name);
    let slice = |t: &TensorEntry| -> Result<&[u8]> {
        let n: usize = t.shape.iter().product();
        if t.len != n * t.dtype.size() {
            return Err(disagree(format!(
                "{}: {} bytes for shape {:?} of {:?}",
                t.name, t.len, t.shape, t.dtype
            )));
        }
        payload
            .get(t.offset..t.offset.saturating_add(t.len))
            .ok_or_else(|| disagree(format!("{}: bytes {}+{} outside payload", t.name, t.offset, t.len)))
    };
    let mut used = 0usize;
    for (name, shape, data) in model.state_mut() {
        let t = find(&name).ok_or_else(|| disagree(format!("tensor {name} missing")))?;
        if t.shape != shape || t.dtype != Dtype::F64 {
            return Err(CheckpointError::Shape {
                name,
                found: t.shape.clone(),
                expected: shape,
            }
            .into());
        }
        let bytes = slice(t)?;
        for (v, b) in data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        used += 1;
    }
    for (layer, codes) in model.weight_codes()? {
        let name = codes_name(&layer);
        let t = find(&name).ok_or_else(|| disagree(format!("tensor {name} missing")))?;
        if t.shape != codes.shape || t.dtype != Dtype::I32 {
            return Err(CheckpointError::Shape {
                name,
                found: t.shape.clone(),
                expected: codes.shape,
            }
            .into());
        }
        let stored: Vec<i32> = slice(t)?
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if stored != codes.codes {
            return Err(disagree(format!("{name}: codes disagree with stored weights")));
        }
        used += 1;
    }
    if used != manifest.tensors.len() {
        return Err(disagree(format!(
            "manifest lists {} tensors, model uses {used}",
            manifest.tensors.len()
        )));
    }
    let model_gates: Vec<String> = model.gates().into_iter().map(|(n, _)| n).collect();
    let names: Vec<String> = manifest.gates.iter().map(|g| g.name.clone()).collect();
    if model_gates != names {
        return Err(CheckpointError::Manifest(format!(
            "gates {names:?} do not match the architecture's {model_gates:?}"
        ))
        .into());
    }
    for (gate, entry) in model.gates_mut().into_iter().zip(&manifest.gates) {
        if gate.seed() != entry.seed {
            return Err(CheckpointError::Manifest(format!("gate {}: seed mismatch", entry.name)).into());
        }
        let pos: u128 = entry
            .word_pos
            .parse()
            .map_err(|_| CheckpointError::Manifest(format!("gate {}: bad word_pos", entry.name)))?;
        gate.set_rng_word_pos(pos);
        gate.tau = entry.tau;
    }
    if manifest.frozen {
        model.freeze_quant();
    }
    Ok(model)
}

/// Writes atomically: the file appears complete or not at all.
pub fn save(model: &HybridModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<HybridModel> {
    from_bytes(&fs::read(path)?)
}
