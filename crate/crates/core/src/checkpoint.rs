//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "JJPACKPT"
//! version    u32      currently 1
//! config     u32 length + UTF-8 text of the run configuration
//! step       u64
//! count      u32      number of tensors
//! tensor*    u16 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!            u32 rows, u32 cols, rows·cols values of that dtype
//! digest     32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Tensors are written in insertion order, so identical state always
//! produces identical bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JJPACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: String, step: u64) -> Self {
        Self { config, step, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) {
        self.tensors.push(NamedTensor { name: name.into(), dtype: DType::F64, rows, cols, data });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| Error::Checkpoint { offset: 0, message: format!("missing tensor {name}") })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for &v in &t.data {
                match t.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(corrupt(0, "file too short"));
        }
        let body = bytes.len() - 32;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            let mut r = Reader { bytes: &bytes[..body], pos: 0 };
            // Prefer a structural error when the body itself is malformed.
            parse(&mut r)?;
            return Err(corrupt(body as u64, "checksum mismatch"));
        }
        let mut r = Reader { bytes: &bytes[..body], pos: 0 };
        let ck = parse(&mut r)?;
        if r.pos != body {
            return Err(corrupt(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(offset: u64, message: &str) -> Error {
    Error::Checkpoint { offset, message: message.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(self.pos as u64, &format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| corrupt(at, &format!("{what} is not UTF-8")))
    }
}

fn parse(r: &mut Reader) -> Result<Checkpoint> {
    if r.take(8, "magic")? != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let at = r.pos as u64;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(corrupt(at, &format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let config = r.utf8(n, "config")?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16("tensor name length")? as usize;
        let name = r.utf8(n, "tensor name")?;
        let at = r.pos as u64;
        let dtype = match r.take(1, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(corrupt(at, &format!("unknown dtype tag {other} for {name}"))),
        };
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let len = rows.checked_mul(cols).and_then(|l| l.checked_mul(width)).ok_or_else(|| corrupt(at, "tensor size overflow"))?;
        let raw = r.take(len, &format!("tensor {name}"))?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        tensors.push(NamedTensor { name, dtype, rows, cols, data });
    }
    Ok(Checkpoint { config, step, tensors })
}
