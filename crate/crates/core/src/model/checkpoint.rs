//! Binary checkpoint format.
//!
//! ```text
//! magic "DRNN" | u32 version | u8 architecture (0 flat, 1 hierarchical)
//! u64 vocab | u64 emb | u64 hidden | u64 attn | u32 tensor count
//! per tensor: u32 name length | name bytes | u32 rank | u64 dims.. | f64 data..
//! ```
//!
//! All integers and floats are little-endian; floats are stored bit-exact.

use std::io::{Read, Write};

use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Architecture;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DRNN";

pub(crate) fn put_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn get_usize<R: Read>(r: &mut R) -> Result<usize> {
    let v = get_u64(r)?;
    usize::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in usize")))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic {b:?})")));
    }
    Ok(())
}

pub(crate) fn arch_tag(arch: Architecture) -> u8 {
    match arch {
        Architecture::Flat => 0,
        Architecture::Hierarchical => 1,
    }
}

pub(crate) fn arch_from_tag(tag: u8) -> Result<Architecture> {
    match tag {
        0 => Ok(Architecture::Flat),
        1 => Ok(Architecture::Hierarchical),
        t => Err(Error::Format(format!("unknown architecture tag {t}"))),
    }
}

pub fn write_checkpoint<W: Write>(params: &ModelParameters, mut w: W) -> Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION)?;
    put_u8(&mut w, arch_tag(c.architecture))?;
    for d in [c.vocab_size, c.emb_dim, c.hidden_dim, c.attn_dim] {
        put_u64(&mut w, d as u64)?;
    }
    let tensors = params.tensors();
    put_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in params.names().iter().zip(tensors) {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u64(&mut w, d as u64)?;
        }
        for &x in t.data() {
            put_f64(&mut w, x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParameters> {
    expect_magic(&mut r, MAGIC, "checkpoint")?;
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let architecture = arch_from_tag(get_u8(&mut r)?)?;
    let config = ModelConfig {
        architecture,
        vocab_size: get_usize(&mut r)?,
        emb_dim: get_usize(&mut r)?,
        hidden_dim: get_usize(&mut r)?,
        attn_dim: get_usize(&mut r)?,
    };
    let mut params = ModelParameters::zeros(config)?;
    let names = params.names();
    let count = get_u32(&mut r)? as usize;
    if count != names.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, {architecture} model needs {}",
            names.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (expected_name, slot) in names.iter().zip(params.tensors()) {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != expected_name {
            return Err(Error::Format(format!("expected tensor {expected_name}, found {name}")));
        }
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| get_usize(&mut r)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let data = (0..slot.len()).map(|_| get_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        values.push(Tensor::new(shape, data)?);
    }
    params.set_tensors(values)?;
    Ok(params)
}
