//! Binary tensor fixture files.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! magic   4 bytes  "PDST"
//! version u32      1
//! dtype   u32      1 = f64, 2 = f32
//! rank    u32      0..=8
//! extents rank x u64
//! data    numel x (8 or 4) bytes, row-major
//! ```
//!
//! Writing the same tensor twice produces identical bytes; a write/read round
//! trip of an f64 tensor is bit-exact.

use super::Tensor;
use crate::error::{PdssError, Result};
use std::io::Write as _;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PDST";
const VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;
const DTYPE_F32: u32 = 2;
const MAX_RANK: usize = 8;

fn header(t: &Tensor, dtype: u32) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(PdssError::InvalidArgument(format!(
            "tensor file rank {} exceeds {MAX_RANK}",
            t.rank()
        )));
    }
    let mut buf = Vec::with_capacity(16 + 8 * t.rank());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dtype.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    Ok(buf)
}

/// Write `t` as an f64 tensor file.
pub fn write_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = header(t, DTYPE_F64)?;
    buf.reserve(8 * t.numel());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Write `t` narrowed to f32 (benchmark fixtures).
pub fn write_tensor_file_f32(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = header(t, DTYPE_F32)?;
    buf.reserve(4 * t.numel());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a tensor file written by either writer; f32 data is widened to f64.
pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| PdssError::BadFile(format!("{}: {msg}", path.display()));
    let take = |off: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(off..off + n)
            .ok_or_else(|| bad("truncated header or data"))
    };
    if take(0, 4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let version = u32_at(4)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dtype = u32_at(8)?;
    if dtype != DTYPE_F64 && dtype != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {dtype}")));
    }
    let rank = u32_at(12)? as usize;
    if rank > MAX_RANK {
        return Err(bad(&format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let e = u64::from_le_bytes(take(16 + 8 * i, 8)?.try_into().unwrap());
        let e: usize = e
            .try_into()
            .map_err(|_| bad("extent exceeds addressable size"))?;
        if e == 0 {
            return Err(bad("zero extent"));
        }
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| bad("extent product overflow"))?;
        shape.push(e);
    }
    let data_off = 16 + 8 * rank;
    let elem = if dtype == DTYPE_F64 { 8 } else { 4 };
    let want = numel
        .checked_mul(elem)
        .ok_or_else(|| bad("extent product overflow"))?;
    if bytes.len() < data_off + want {
        return Err(bad("truncated data"));
    }
    if bytes.len() > data_off + want {
        return Err(bad("trailing bytes after data"));
    }
    let mut data = Vec::with_capacity(numel);
    if dtype == DTYPE_F64 {
        for i in 0..numel {
            let off = data_off + 8 * i;
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        }
    } else {
        for i in 0..numel {
            let off = data_off + 4 * i;
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        }
    }
    Tensor::new(shape, data)
}
