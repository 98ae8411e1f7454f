//! SAEP parameter checkpoints.
//!
//! ```text
//! "SAEP" | u32 version=1 | u8 variant tag | u32 n | u32 m
//! then per tensor: u64 element count | count × f32 (row-major)
//! tensors: W_gate, b_gate, [r_mag, b_mag], W_dec, b_dec
//! ```
//!
//! Bit 7 of the tag marks an untied magnitude path; the `W_mag` matrix then
//! takes the place of `r_mag`.

use std::path::Path;

use ndarray::{Array1, Array2, ShapeBuilder};
use sha2::{Digest, Sha256};

use crate::error::{Result, SaeError};
use crate::io::{write_atomic, ByteReader};
use crate::sae::{GateMagnitude, MagnitudeWeights, SaeParams, SaeVariant};

const MAGIC: &[u8; 4] = b"SAEP";
const VERSION: u32 = 1;
const UNTIED_FLAG: u8 = 0x80;

pub fn to_bytes(params: &SaeParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut buf = Vec::with_capacity(17 + params.num_parameters() * 4 + 6 * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let mut tag = params.variant.tag();
    if params.magnitude.as_ref().is_some_and(|m| !m.is_tied()) {
        tag |= UNTIED_FLAG;
    }
    buf.push(tag);
    for dim in [params.n(), params.m()] {
        let d = u32::try_from(dim)
            .map_err(|_| SaeError::Config(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for (_, tensor) in params.tensors() {
        buf.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        // Logical (row-major) order regardless of memory layout.
        for v in tensor.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<SaeParams> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, expected SAEP"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let tag = r.u8()?;
    let variant = SaeVariant::from_tag(tag & !UNTIED_FLAG)
        .ok_or_else(|| r.error_at(8, format!("unknown variant tag {tag}")))?;
    let untied = tag & UNTIED_FLAG != 0;
    if untied && !variant.is_gated() {
        return Err(r.error_at(8, "untied flag on a non-gated variant"));
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;

    let read_tensor = |r: &mut ByteReader, name: &str, expected: usize| -> Result<Vec<f64>> {
        let at = r.offset();
        let count = r.u64()?;
        if count != expected as u64 {
            return Err(r.error_at(
                at,
                format!("{name}: expected {expected} elements, header says {count}"),
            ));
        }
        let mut out = Vec::with_capacity(expected.min(bytes.len() / 4));
        for _ in 0..expected {
            out.push(r.f32()? as f64);
        }
        Ok(out)
    };

    let w_gate = Array2::from_shape_vec((m, n), read_tensor(&mut r, "w_gate", m * n)?)
        .expect("length checked");
    let b_gate = Array1::from(read_tensor(&mut r, "b_gate", m)?);
    let magnitude = if variant.is_gated() {
        let weights = if untied {
            MagnitudeWeights::Untied(
                Array2::from_shape_vec((m, n), read_tensor(&mut r, "w_mag", m * n)?)
                    .expect("length checked"),
            )
        } else {
            MagnitudeWeights::Tied(Array1::from(read_tensor(&mut r, "r_mag", m)?))
        };
        let b_mag = Array1::from(read_tensor(&mut r, "b_mag", m)?);
        Some(GateMagnitude { weights, b_mag })
    } else {
        None
    };
    let dec = read_tensor(&mut r, "w_dec", n * m)?;
    let mut w_dec = Array2::zeros((n, m).f());
    for (dst, src) in w_dec.iter_mut().zip(dec) {
        *dst = src;
    }
    let b_dec = Array1::from(read_tensor(&mut r, "b_dec", n)?);
    if !r.is_empty() {
        return Err(r.error_at(r.offset(), "trailing bytes after payload"));
    }
    let params = SaeParams {
        variant,
        w_gate,
        b_gate,
        magnitude,
        w_dec,
        b_dec,
    };
    params.validate()?;
    Ok(params)
}

pub fn save(params: &SaeParams, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params)?)
}

pub fn load(path: &Path) -> Result<SaeParams> {
    from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of a checkpoint file; keys feature descriptions to the exact
/// model they were produced from.
pub fn digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}
