//! Binary checkpoints: `PDCKPT01`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::state::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PDCKPT01";

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    encoder: EncoderConfig,
    records: Vec<Record>,
    payload_sha256: String,
}

/// Serializes every parameter of `state` together with free-form metadata.
pub fn checkpoint_bytes(state: &EncoderState, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(state.params.len());
    let mut offset = 0;
    for id in state.params.ids() {
        let t = state.params.get(id);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        records.push(Record {
            name: state.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = Header {
        meta: meta.clone(),
        encoder: state.config().clone(),
        records,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Inverse of [`checkpoint_bytes`]; values come back bit-identical.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EncoderState, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let payload = &body[header_len..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Format("checkpoint payload checksum mismatch".into()));
    }
    if !payload.len().is_multiple_of(8) {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();

    let mut state = EncoderState::init(&header.encoder, &mut rng_for(0))?;
    if header.records.len() != state.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, configuration expects {}",
            header.records.len(),
            state.params.len()
        )));
    }
    for r in &header.records {
        let end = r.offset.checked_add(r.len).filter(|&e| e <= values.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("tensor `{}` runs past the payload", r.name)));
        };
        state.set_param(&r.name, Tensor::new(r.shape.clone(), values[r.offset..end].to_vec())?)?;
    }
    Ok((state, header.meta))
}

pub fn save_checkpoint(path: &Path, state: &EncoderState, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderState, serde_json::Value)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
