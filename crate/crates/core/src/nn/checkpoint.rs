//! `GNSSNET1` checkpoints: magic, u32 little-endian header length, JSON
//! architecture header, then the parameter vector as little-endian f32.

use super::{ArchConfig, EmbeddingNetwork};
use crate::error::{Error, Result};
use crate::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNSSNET1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    param_count: usize,
}

pub fn encode_checkpoint<T: Scalar>(net: &EmbeddingNetwork<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { arch: net.arch.clone(), param_count: net.param_count() })?;
    let len = u32::try_from(header.len()).map_err(|_| Error::invalid("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * net.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    for p in &net.params {
        out.extend_from_slice(&(p.f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingNetwork<T>> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing GNSSNET1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    let raw = &body[len..];
    if raw.len() != 4 * header.param_count {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            4 * header.param_count,
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    EmbeddingNetwork::from_params(header.arch, params).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &EmbeddingNetwork<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EmbeddingNetwork<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
