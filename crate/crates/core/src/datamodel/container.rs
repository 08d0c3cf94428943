//! `SPCM` binary tensor container.
//!
//! Layout (all integers little-endian):
//! `"SPCM"`, `u16` version, `u16` entry count, then per entry a `u16` name
//! length, the UTF-8 name, a `u8` rank, `rank` `u32` extents and the row-major
//! payload as `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::tensor::MAX_RANK;
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"SPCM";
pub const VERSION: u16 = 1;

/// Ordered list of named tensors.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let count = u16::try_from(tensors.len())
        .map_err(|_| Error::InvalidArgument(format!("too many container entries: {}", tensors.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::InvalidArgument("container entry name must not be empty".into()));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("container entry name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::InvalidArgument(format!("extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Container {
                offset: self.pos,
                message: format!("truncated {what}: expected {n} bytes, found {available}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Container {
            offset: 0,
            message: "bad magic, expected \"SPCM\"".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Container {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u16("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16("name length")? as usize;
        if len == 0 {
            return Err(Error::Container {
                offset: name_at,
                message: "empty entry name".into(),
            });
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Container {
                offset: name_at + 2,
                message: format!("entry name is not UTF-8: {e}"),
            })?
            .to_owned();
        let rank_at = r.pos;
        let rank = r.take(1, "rank")?[0] as usize;
        if rank > MAX_RANK {
            return Err(Error::Container {
                offset: rank_at,
                message: format!("rank {rank} exceeds {MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, &format!("payload of '{name}'"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Container {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save_container(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
