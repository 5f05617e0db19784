//! `SCKP` checkpoint files: named `f64` parameter records.
//!
//! ```text
//! magic   "SCKP"                4 bytes
//! version u32 LE                = 1
//! records until EOF:
//!   name_len u16 LE, name (UTF-8)
//!   rank u8, dims u32 LE × rank
//!   data f64 LE × product(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Contract(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format { offset: self.pos as u64, message: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad checkpoint magic".into() });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: start as u64 + 2, message: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(r.take(4, "dims")?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, "data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn write(path: &Path, records: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Copies values from `records` into `targets` by name; every target must
/// be present with a matching shape.
pub fn restore(records: &[(String, Tensor)], targets: Vec<(String, &mut Tensor)>) -> Result<()> {
    for (name, t) in targets {
        let (_, src) = records.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::Contract(format!("checkpoint lacks `{name}`")))?;
        if !src.same_shape(t) {
            return Err(Error::Contract(format!("checkpoint shape mismatch at `{name}`")));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
