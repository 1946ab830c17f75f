//! Checkpoint serialization: an 8-byte little-endian header length, a JSON
//! header describing every parameter (name, shape, payload offset, frozen
//! flag), then the raw little-endian f64 payload. Round-trips are bitwise.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Fingerprint of the run configuration that produced the checkpoint.
    config: String,
    params: Vec<ParamHeader>,
}

/// Write `store` with the given config fingerprint.
pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore, config: &str) -> Result<()> {
    let mut params = Vec::new();
    let mut offset = 0usize;
    for e in store.iter() {
        params.push(ParamHeader {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset,
            frozen: e.frozen,
        });
        offset += e.tensor.numel();
    }
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        config: config.to_string(),
        params,
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for e in store.iter() {
        for &v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// A loaded checkpoint: the parameters plus the fingerprint recorded at
/// save time, so callers can compare it against the live configuration.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: String,
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 1 << 30 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            header.version, CHECKPOINT_VERSION
        )));
    }
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let mut payload = vec![0u8; total * 8];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Checkpoint("truncated payload".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if p.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "parameter '{}': offset {} does not match layout ({})",
                p.name, p.offset, expected_offset
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = (p.offset + i) * 8;
            data.push(f64::from_le_bytes(
                payload[start..start + 8].try_into().unwrap(),
            ));
        }
        store.insert(&p.name, Tensor::new(p.shape.clone(), data)?)?;
        store.get_mut(&p.name)?.frozen = p.frozen;
        expected_offset += n;
    }
    Ok(Checkpoint {
        params: store,
        config: header.config,
    })
}
