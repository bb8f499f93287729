//! Binary checkpoints: magic, header length, header SHA-256, JSON header,
//! then little-endian tensor blobs whose digest is recorded in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamHyper, AdamW, Moments};
use super::trainer::TrainState;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::{DType, Rng, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"VOLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    model_config: ModelConfig,
    state: TrainState,
    dropout_rng: Rng,
    adam: AdamHyper,
    optimizer_step: u64,
    tensors: Vec<Entry>,
    blob_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes model, optimizer and training state atomically (temp file, then
/// rename), so a crash never leaves a half-written checkpoint at `path`.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, optimizer: &AdamW<T>, state: &TrainState) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind: Kind, t: &Tensor<T>| {
        let offset = blob.len() as u64;
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        tensors.push(Entry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            bytes: blob.len() as u64 - offset,
        });
    };
    for p in model.params() {
        push(&p.name, Kind::Param, &p.value);
    }
    for b in model.buffers() {
        push(&b.name, Kind::Buffer, &b.value);
    }
    for m in &optimizer.moments {
        push(&m.name, Kind::AdamM, &m.m);
        push(&m.name, Kind::AdamV, &m.v);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        model_config: model.config().clone(),
        state: state.clone(),
        dropout_rng: model.dropout_rng().clone(),
        adam: optimizer.hyper,
        optimizer_step: optimizer.step,
        tensors,
        blob_sha256: hex(&Sha256::digest(&blob)),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(48 + header_bytes.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&header_bytes));
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&blob);

    let tmp = path.with_extension("ckpt.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

/// Restores model, optimizer and training state. Any structural or checksum
/// problem is an error and nothing partial is returned.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, AdamW<T>, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic or truncated preamble)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[48..];
    if header_len > body.len() {
        return Err(corrupt(path, format!("header of {header_len} bytes exceeds file")));
    }
    let (header_bytes, blob) = body.split_at(header_len);
    if Sha256::digest(header_bytes).as_slice() != &bytes[16..48] {
        return Err(corrupt(path, "header checksum mismatch"));
    }
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != T::DTYPE {
        return Err(corrupt(path, format!("stored as {:?}, requested {:?}", header.dtype, T::DTYPE)));
    }
    if hex(&Sha256::digest(blob)) != header.blob_sha256 {
        return Err(corrupt(path, "tensor data checksum mismatch (truncated or modified)"));
    }

    let mut model = Model::<T>::build(&header.model_config, 0)?;
    let mut optimizer = AdamW::init_for(&model, header.adam)?;
    optimizer.step = header.optimizer_step;
    let mut restored = std::collections::BTreeSet::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset as usize + e.bytes as usize;
        if e.dtype != T::DTYPE || e.bytes as usize != n * T::DTYPE.size() || end > blob.len() {
            return Err(corrupt(path, format!("bad directory entry for '{}'", e.name)));
        }
        let data = blob[e.offset as usize..end].chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        let t = Tensor::from_vec(&e.shape, data)?;
        match e.kind {
            Kind::Param | Kind::Buffer => model.set_tensor(&e.name, t).map_err(|err| corrupt(path, err))?,
            Kind::AdamM | Kind::AdamV => {
                let slot = optimizer
                    .moments
                    .iter_mut()
                    .find(|m| m.name == e.name)
                    .ok_or_else(|| corrupt(path, format!("moments for unknown parameter '{}'", e.name)))?;
                let target = if e.kind == Kind::AdamM { &mut slot.m } else { &mut slot.v };
                if target.shape() != t.shape() {
                    return Err(corrupt(path, format!("moment shape mismatch for '{}'", e.name)));
                }
                *target = t;
            }
        }
        restored.insert((e.name.clone(), e.kind));
    }
    let expected: Vec<(String, Kind)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), Kind::Param))
        .chain(model.buffers().iter().map(|b| (b.name.clone(), Kind::Buffer)))
        .collect();
    if let Some((name, _)) = expected.iter().find(|k| !restored.contains(*k)) {
        return Err(corrupt(path, format!("missing tensor '{name}'")));
    }
    // A checkpoint taken before the first step carries no moments.
    if !header.tensors.iter().any(|e| e.kind == Kind::AdamM) {
        optimizer.moments = Vec::<Moments<T>>::new();
    }
    model.set_dropout_rng(header.dropout_rng);
    Ok((model, optimizer, header.state))
}
