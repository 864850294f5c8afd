//! Binary checkpoint: `MMRN` magic, `u32` version, `u64` header length, a
//! JSON header with the architecture, then the flat parameters as `f64` LE.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, InputNorm, ModelParams};
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MMRN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    num_params: usize,
    input_norm: InputNorm,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form provenance such as the training mode and epoch.
    pub metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, metadata: &BTreeMap<String, String>) -> Result<()> {
    let header = Header {
        arch: params.arch,
        num_params: params.num_params(),
        input_norm: params.input_norm.clone(),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let flat = params.flatten();
    let mut buf = Vec::with_capacity(16 + header.len() + flat.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing { path: path.into() });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
    let mut params = ModelParams::new(header.arch, 0).map_err(|e| Error::format(path, e))?;
    if params.num_params() != header.num_params {
        return Err(bad("parameter count does not match the architecture"));
    }
    let payload = &bytes[16 + header_len..];
    if payload.len() != header.num_params * 8 {
        return Err(bad("payload length does not match the parameter count"));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    params.load_flat(&flat)?;
    params.input_norm = header.input_norm;
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}
