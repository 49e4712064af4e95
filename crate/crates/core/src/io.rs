//! Flat binary blob + JSON sidecar persistence.
//!
//! Arrays persist as little-endian floats in row-major order with shape and
//! meaning carried by a JSON document next to the blob. f64 is used for
//! checkpoints and grids; images are stored as f32.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub fn write_f64_blob(path: &Path, a: &DenseArray) -> Result<()> {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for &v in a.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64_blob(path: &Path, shape: Vec<usize>) -> Result<DenseArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for shape {:?}, found {}", n * 8, shape, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DenseArray::from_vec(shape, data))
}

/// Images: row-major f32, little-endian.
pub fn write_f32_blob(path: &Path, a: &DenseArray) -> Result<()> {
    let mut bytes = Vec::with_capacity(a.len() * 4);
    for &v in a.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_blob(path: &Path, shape: Vec<usize>) -> Result<DenseArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for shape {:?}, found {}", n * 4, shape, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DenseArray::from_vec(shape, data))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
