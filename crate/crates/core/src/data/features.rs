use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eight-byte magic that opens every feature file.
pub const FBANK_MAGIC: &[u8; 8] = b"FBANK1\0\0";
const HEADER_LEN: usize = 16;

/// Reads a feature file: magic, `u32` rows, `u32` cols (little endian), then
/// `rows·cols` little-endian `f32` values in row-major order.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != FBANK_MAGIC {
        return Err(Error::format(path, "missing FBANK1 header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, format!("empty feature matrix {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, "header shape overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("header says {rows}x{cols} ({expected} bytes) but file has {} bytes", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            path,
            format!("non-finite value at frame {}, bin {}", pos / cols, pos % cols),
        ));
    }
    Tensor::new(vec![rows, cols], data)
}

/// Writes a `[rows, cols]` tensor in the feature file format (values narrowed to `f32`).
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::usage(format!("feature matrix must be 2-D, got {:?}", features.shape())));
    }
    let (rows, cols) = (features.shape()[0] as u32, features.shape()[1] as u32);
    let mut bytes = Vec::with_capacity(HEADER_LEN + features.len() * 4);
    bytes.extend_from_slice(FBANK_MAGIC);
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for &v in features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
