//! Binary container for trained networks.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic       8 bytes  "BDPSMDL1"
//! version     u32      2 (1 is read as version 2 without the skip block)
//! activation  u32      0 = tanh, 1 = silu
//! ndim        u32      followed by ndim × u64 domain shape
//! nwidths     u32      followed by nwidths × u64 layer widths (input first)
//! per layer   f64 × (out × in) weights, row-major, then f64 × out biases
//! skip        u32      0 = none, 1 = followed by f64 × n means, f64 × n variances
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::mlp::{Activation, GaussianSkip, Layer, MlpScore};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"BDPSMDL1";
pub const MODEL_VERSION: u32 = 2;

// Refuse absurd headers before allocating.
const MAX_DIM: u64 = 1 << 24;

pub fn write_mlp<W: Write>(model: &MlpScore, out: &mut W) -> Result<()> {
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&model.activation.tag().to_le_bytes())?;
    out.write_all(&(model.shape.len() as u32).to_le_bytes())?;
    for &d in &model.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let widths = model.widths();
    out.write_all(&(widths.len() as u32).to_le_bytes())?;
    for &w in &widths {
        out.write_all(&(w as u64).to_le_bytes())?;
    }
    for layer in &model.layers {
        for r in 0..layer.weight.nrows() {
            for c in 0..layer.weight.ncols() {
                out.write_all(&layer.weight[(r, c)].to_le_bytes())?;
            }
        }
        for b in layer.bias.iter() {
            out.write_all(&b.to_le_bytes())?;
        }
    }
    match &model.skip {
        None => out.write_all(&0u32.to_le_bytes())?,
        Some(skip) => {
            out.write_all(&1u32.to_le_bytes())?;
            for v in skip.mean.iter().chain(&skip.var) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_dims<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let n = read_u32(r)? as u64;
    if n == 0 || n > 16 {
        return Err(Error::Format(format!("bad dimension count {n}")));
    }
    (0..n)
        .map(|_| {
            let d = read_u64(r)?;
            if d == 0 || d > MAX_DIM {
                return Err(Error::Format(format!("bad dimension {d}")));
            }
            Ok(d as usize)
        })
        .collect()
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<MlpScore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a BDPSMDL1 model file".into()));
    }
    let version = read_u32(r)?;
    if version != MODEL_VERSION && version != 1 {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let tag = read_u32(r)?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown activation tag {tag}")))?;
    let shape = read_dims(r)?;
    let widths = read_dims(r)?;
    if widths.len() < 2 {
        return Err(Error::Format("model needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut weight = DMatrix::zeros(fan_out, fan_in);
        for row in 0..fan_out {
            for col in 0..fan_in {
                weight[(row, col)] = read_f64(r)?;
            }
        }
        let bias = (0..fan_out).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        layers.push(Layer { weight, bias: DVector::from_vec(bias) });
    }
    let bad = |e: Error| Error::Format(format!("inconsistent model file: {e}"));
    let model = MlpScore::from_layers(&shape, activation, layers).map_err(bad)?;
    if version == 1 {
        return Ok(model);
    }
    match read_u32(r)? {
        0 => Ok(model),
        1 => {
            let n = model.dim();
            let mean = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let var = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            model.with_skip(GaussianSkip { mean, var }).map_err(bad)
        }
        t => Err(Error::Format(format!("unknown skip tag {t}"))),
    }
}

pub fn save_mlp(model: &MlpScore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_mlp(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<MlpScore> {
    let bytes = std::fs::read(path)?;
    read_mlp(&mut bytes.as_slice())
}
