//! Checkpoint file format.
//!
//! ```text
//! "ALURECKPT"                     9 bytes
//! format version                  u32 LE
//! config length                   u64 LE
//! config                          canonical JSON (serde field order)
//! tensor count                    u32 LE
//! per tensor, canonical order:    u64 LE length, then that many f64 LE
//! CRC32 of all preceding bytes    u32 LE
//! ```
//!
//! Tensor order is [`ModelParams::tensors`]: per source (token_emb, kind_emb,
//! cfee decay_w, decay_b, relpos, time_bias, per layer [ln1 gain/bias, wq, wk,
//! wv, wo, ln2 gain/bias, w1, b1, w2, b2], pool_queries, pool wq/wk/wv/wo,
//! placeholder), then compression tensors, then the account table.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::codec::{put_f64s, put_u32, put_u64, seal, unseal, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"ALURECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(cfg)?;
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(64 + config.len() + params.param_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(&config);
    put_u32(&mut out, tensors.len() as u32);
    for (_, t) in tensors {
        put_u64(&mut out, t.len() as u64);
        put_f64s(&mut out, t);
    }
    Ok(seal(out))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let body = unseal(bytes, CHECKPOINT_MAGIC, "ALURECKPT")?;
    let mut r = Reader::new(body);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.len_prefix(1)?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    cfg.validate()?;

    let lengths = ModelParams::tensor_lengths(&cfg);
    let n = r.u32()? as usize;
    if n != lengths.len() {
        return Err(Error::Format(format!("expected {} tensors, found {n}", lengths.len())));
    }
    // Check the whole payload size before allocating anything.
    let expected: usize = lengths.iter().map(|l| 8 + 8 * l).sum();
    if expected != r.remaining() {
        return Err(Error::Format(format!(
            "tensor payload is {} bytes, config implies {expected}",
            r.remaining()
        )));
    }
    let mut params = ModelParams::zeros(&cfg);
    for (slot, &want) in params.tensors_mut().into_iter().zip(&lengths) {
        let len = r.len_prefix(8)?;
        if len != want {
            return Err(Error::Format(format!("tensor length {len}, expected {want}")));
        }
        let values = r.f64s(len)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        slot.copy_from_slice(&values);
    }
    r.finish()?;
    Ok((params, cfg))
}

/// Content id of an encoded checkpoint: its trailing CRC32.
pub fn checkpoint_id(bytes: &[u8]) -> u64 {
    bytes
        .len()
        .checked_sub(4)
        .map_or(0, |n| u32::from_le_bytes(bytes[n..].try_into().expect("4 bytes")) as u64)
}

/// Writes the checkpoint and returns its id.
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<u64> {
    let bytes = encode_checkpoint(params, cfg)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_id(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
