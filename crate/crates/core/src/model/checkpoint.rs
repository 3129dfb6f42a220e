//! Checkpoint container. All integers and reals little-endian:
//!
//! ```text
//! magic          8 bytes  "MRISCKPT"
//! version        u32      (currently 1)
//! embed_dim      u32
//! fusion_layers  u32
//! patch_size     u32
//! pool           u32
//! vocab_size     u32
//! image_height   u32
//! image_width    u32
//! step           u64
//! n_params       u64
//! params         n_params × f64   (ParamLayout order)
//! first moment   n_params × f64
//! second moment  n_params × f64
//! sha256         32 bytes of everything above
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::checksum::{append_digest, strip_digest};
use crate::error::{Error, Result};
use crate::synthdata::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRISCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Magic, version, seven config fields, step and parameter count.
const HEADER_LEN: usize = 8 + 4 * 8 + 8 + 8;

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let c = &state.config;
    let n = state.num_params();
    let mut out = Vec::with_capacity(HEADER_LEN + n * 24 + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        c.embed_dim as u32,
        c.fusion_layers as u32,
        c.patch_size as u32,
        c.pool as u32,
        c.vocab_size as u32,
        c.image_height as u32,
        c.image_width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in state.params.iter().chain(&state.first_moment).chain(&state.second_moment) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    append_digest(&mut out);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<ModelState> {
    let bad = |why: String| Error::corrupt(path, why);
    let bytes = strip_digest(bytes, path)?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic or too short)".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = u32_at(8) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        embed_dim: u32_at(12),
        fusion_layers: u32_at(16),
        patch_size: u32_at(20),
        pool: u32_at(24),
        vocab_size: u32_at(28),
        image_height: u32_at(32),
        image_width: u32_at(36),
    };
    let mut state = ModelState::zeros(config).map_err(|e| bad(e.to_string()))?;
    state.step = u64::from_le_bytes(bytes[40..48].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[48..56].try_into().unwrap()) as usize;
    if n != state.num_params() {
        return Err(bad(format!("parameter count {n} does not match config ({})", state.num_params())));
    }
    if bytes.len() != HEADER_LEN + n * 24 {
        return Err(bad(format!("expected {} bytes, found {}", HEADER_LEN + n * 24, bytes.len())));
    }
    let mut vals = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for buf in [&mut state.params, &mut state.first_moment, &mut state.second_moment] {
        for v in buf.iter_mut() {
            *v = vals.next().unwrap();
        }
    }
    if !state.all_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(state)
}

pub fn write_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
