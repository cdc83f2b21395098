//! Checkpoint file (little-endian): `"MUCK"`, version `u32 = 1`, config as a
//! `u64`-length-prefixed JSON blob, step `u64`, tensor count `u32`, then per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, dims `u64` each, and
//! `f32` values row-major.

use std::path::Path;

use ndarray::Array2;

use super::config::ModelConfig;
use super::network::MaskedPredictionModel;
use super::params::ParamStore;
use crate::error::Result;
use crate::io::{open, put_f32s, write_bytes, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MUCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &MaskedPredictionModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&model.step.to_le_bytes());
    buf.extend_from_slice(&(model.params.names.len() as u32).to_le_bytes());
    for (name, v) in model.params.names.iter().zip(&model.params.values) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(v.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(v.ncols() as u64).to_le_bytes());
        put_f32s(&mut buf, v.iter().map(|&x| x as f32));
    }
    Ok(buf)
}

pub fn save(model: &MaskedPredictionModel, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode(model)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<MaskedPredictionModel> {
    let path = path.as_ref();
    let mut r = Reader::new(open(path)?, path);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u64()? as usize;
    let blob = r.byte_vec(cfg_len)?;
    let config: ModelConfig =
        serde_json::from_slice(&blob).map_err(|e| r.fail(format!("bad config blob: {e}")))?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.byte_vec(len)?).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        if rank != 2 {
            return Err(r.fail(format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let data = r.f32_vec(rows * cols)?;
        let v = Array2::from_shape_vec((rows, cols), data.into_iter().map(f64::from).collect())
            .map_err(|e| r.fail(e.to_string()))?;
        names.push(name);
        values.push(v);
    }
    MaskedPredictionModel::from_params(config, ParamStore { names, values }, step)
}

/// Rounds every parameter to f32 precision, matching what a save/load
/// round trip would produce.
pub fn round_to_storage(model: &mut MaskedPredictionModel) {
    for v in &mut model.params.values {
        v.mapv_inplace(|x| x as f32 as f64);
    }
}
