//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPOOLCK\0"
//! version    u32      1
//! header     u64 length + UTF-8 JSON {"config": ..., "meta": ...}
//! count      u32      number of tensors
//! per tensor:
//!   name     u32 length + UTF-8 bytes
//!   dtype    u8       1 = f32, 2 = f64
//!   ndim     u8
//!   shape    ndim x u64
//!   values   row-major, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{DType, Real, Tensor};

use super::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPOOLCK\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Real, W: Write>(mut w: W, model: &Model<T>, meta: &serde_json::Value) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        meta: meta.clone(),
    })
    .map_err(|e| bad(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[T::DTYPE.code(), 2])?;
        for d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&T::to_le_bytes_vec(t.data()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec<R: Read>(r: &mut R, len: u64) -> Result<Vec<u8>, ModelError> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(bad("truncated file"));
    }
    Ok(buf)
}

/// Reads a checkpoint, converting stored values to `T` if needed.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<(Model<T>, serde_json::Value), ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u64(&mut r)?;
    let header: Header = serde_json::from_slice(&read_vec(&mut r, len)?).map_err(|e| bad(e.to_string()))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(&mut r)?;
        let name = String::from_utf8(read_vec(&mut r, nlen as u64)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_code(tag[0]).ok_or_else(|| bad(format!("unknown dtype {}", tag[0])))?;
        if tag[1] != 2 {
            return Err(bad(format!("tensor {name} has {} dims", tag[1])));
        }
        let (rows, cols) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
        let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
        let t: Tensor<T> = match dtype {
            DType::F32 => {
                let v = f32::from_le_slice(&read_vec(&mut r, n as u64 * 4)?);
                Tensor::new(rows, cols, v).map_err(|e| bad(e.to_string()))?.cast()
            }
            DType::F64 => {
                let v = f64::from_le_slice(&read_vec(&mut r, n as u64 * 8)?);
                Tensor::new(rows, cols, v).map_err(|e| bad(e.to_string()))?.cast()
            }
        };
        names.push(name);
        params.push(t);
    }
    let model = Model::from_params(header.config, params)?;
    if model.param_names() != names.as_slice() {
        return Err(bad("tensor names do not match the config"));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, meta: &serde_json::Value) -> Result<(), ModelError> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, meta)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, serde_json::Value), ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
