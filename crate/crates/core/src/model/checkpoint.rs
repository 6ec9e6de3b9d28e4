//! Binary checkpoint format (little-endian, no padding):
//!
//! ```text
//! magic "MNTX" | version u32 = 1 | count u32 |
//!   count × ( name_len u16 | name utf-8 | ndim u8 | dims u32 × ndim | data f64 × prod(dims) )
//! ```

use std::path::Path;

use super::NetworkParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MNTX";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &NetworkParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        let ndim = u8::try_from(t.ndim())
            .map_err(|_| Error::invalid(format!("{name}: too many dimensions")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("{name}: dimension too large")))?;
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
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint {
                field: field.into(),
                reason: format!("truncated at byte {} (need {n} more)", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            field: "magic".into(),
            reason: format!("expected {MAGIC:?}, found {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            field: "version".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = NetworkParams::new();
    for i in 0..count {
        let len = r.u16(&format!("tensor {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("tensor {i} name"))?)
            .map_err(|e| Error::Checkpoint {
                field: format!("tensor {i} name"),
                reason: e.to_string(),
            })?
            .to_string();
        let ndim = r.u8(&format!("{name} ndim"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("{name} dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &format!("{name} data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint {
            field: format!("{name} dims"),
            reason: e.to_string(),
        })?;
        params
            .insert(name.clone(), tensor)
            .map_err(|e| Error::Checkpoint {
                field: name.clone(),
                reason: e.to_string(),
            })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            field: "trailer".into(),
            reason: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
