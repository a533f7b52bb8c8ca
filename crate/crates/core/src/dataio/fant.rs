//! FANT: a minimal little-endian container for one `f64` tensor.
//!
//! ```text
//! "FANT" | version: u32 = 1 | dtype: u8 = 1 (f64) | ndim: u8 | ndim × u64 extents | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FannError, Result};
use crate::tensor::Tensor;

pub const FANT_MAGIC: &[u8; 4] = b"FANT";
pub const FANT_VERSION: u32 = 1;
pub const FANT_DTYPE_F64: u8 = 1;

pub fn encode_fant(t: &Tensor) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(10 + 8 * dims.len() + 8 * t.len());
    out.extend_from_slice(FANT_MAGIC);
    out.extend_from_slice(&FANT_VERSION.to_le_bytes());
    out.push(FANT_DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fant(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let need = |at: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < at + n {
            Err(FannError::format(
                path,
                bytes.len() as u64,
                format!("truncated {what}: expected {n} bytes at offset {at}"),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 10, "header")?;
    if &bytes[..4] != FANT_MAGIC {
        return Err(FannError::format(path, 0, "bad magic, expected FANT"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FANT_VERSION {
        return Err(FannError::format(path, 4, format!("unsupported version {version}")));
    }
    if bytes[8] != FANT_DTYPE_F64 {
        return Err(FannError::format(path, 8, format!("unsupported dtype {}", bytes[8])));
    }
    let ndim = bytes[9] as usize;
    if ndim == 0 {
        return Err(FannError::format(path, 9, "empty shape (ndim = 0)"));
    }
    need(10, 8 * ndim, "extents")?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 10 + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        if d == 0 {
            return Err(FannError::format(path, at as u64, "zero extent"));
        }
        dims.push(usize::try_from(d).map_err(|_| FannError::format(path, at as u64, "extent overflows"))?);
    }
    let start = 10 + 8 * ndim;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| FannError::format(path, 10, "shape overflows"))?;
    let available = bytes.len() - start;
    if available != count {
        return Err(FannError::format(
            path,
            start as u64,
            format!("payload holds {available} bytes, shape {dims:?} needs {count}"),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(&dims, data).map_err(|e| FannError::format(path, start as u64, e.to_string()))
}

pub fn write_fant(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_fant(t)).map_err(|e| FannError::io(path, e))
}

pub fn read_fant(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FannError::io(path, e))?;
    decode_fant(&bytes, path)
}
