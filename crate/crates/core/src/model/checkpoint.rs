//! Checkpoint files.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PFALCKPT"
//! 8       4     format_version (u32)
//! 12      4     header_len (u32)
//! 16      n     header: compact JSON {format_version, config, step_count,
//!               seed, rng_state, param_count}
//! 16+n    8*p   parameters, f64 in layout order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFALCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    step_count: u64,
    seed: u64,
    rng_state: u64,
    param_count: usize,
}

pub fn checkpoint_bytes(state: &ModelState) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: state.config.clone(),
        step_count: state.step_count,
        seed: state.seed,
        rng_state: state.rng_state,
        param_count: state.params.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * state.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &state.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(state))?;
    Ok(())
}

/// Load a checkpoint. With `expected` set, any config difference is an
/// error.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(&format!("unsupported format_version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(bad("model config does not match the expected config"));
        }
    }
    let payload = &bytes[16 + hlen..];
    if payload.len() != 8 * header.param_count {
        return Err(bad(&format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            8 * header.param_count
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelState::from_parts(header.config, params, header.step_count, header.seed, header.rng_state)
}
