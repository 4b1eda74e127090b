//! SAIL-EMB binary embedding blocks.
//!
//! Layout (little-endian): magic `SAEB`, version `u32 = 1`, `d: u32`,
//! `n: u64`, then `n * d` `f32` values in row-major order.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const EMB_MAGIC: [u8; 4] = *b"SAEB";
pub const EMB_VERSION: u32 = 1;

/// A decoded SAIL-EMB block: `n` rows of `d` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbBlock {
    pub d: usize,
    pub n: usize,
    pub data: Vec<f32>,
}

impl EmbBlock {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

pub fn write_emb_block<W: Write>(w: &mut W, d: usize, rows: &[f32]) -> Result<()> {
    if d == 0 || !rows.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "{} values cannot form rows of width {d}",
            rows.len()
        )));
    }
    let d32 = u32::try_from(d).map_err(|_| Error::Shape(format!("d={d} exceeds u32")))?;
    let n = (rows.len() / d) as u64;
    let mut buf = Vec::with_capacity(20 + rows.len() * 4);
    buf.extend_from_slice(&EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&d32.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    for v in rows {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io("<emb block>", e))
}

pub fn read_emb_block<R: Read>(r: &mut R) -> Result<EmbBlock> {
    let mut header = [0u8; 20];
    read_exact(r, &mut header, "SAIL-EMB header")?;
    if header[0..4] != EMB_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &header[0..4],
            EMB_MAGIC
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != EMB_VERSION {
        return Err(Error::Version {
            found: version,
            expected: EMB_VERSION,
        });
    }
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(header[12..20].try_into().unwrap());
    if d == 0 {
        return Err(Error::Format("embedding dimension is 0".into()));
    }
    let n = usize::try_from(n).map_err(|_| Error::Format(format!("row count {n} too large")))?;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format(format!("n={n} x d={d} overflows")))?;
    let mut bytes = vec![0u8; count * 4];
    read_exact(r, &mut bytes, "SAIL-EMB payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbBlock { d, n, data })
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::io(what, e),
    })
}
