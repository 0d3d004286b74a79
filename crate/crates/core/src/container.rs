//! Binary container used for weights and index files.
//!
//! ```text
//! magic[4] | version u32 | header_len u32 | header (UTF-8 JSON)
//! n_tensors u32 | tensor record*
//! n_sections u32 | section*
//! file checksum u64
//!
//! tensor record: name_len u16 | name | rank u8 | dims u32*rank
//!                | data f32*prod(dims) | checksum u64
//! section:       name_len u16 | name | len u64 | bytes | checksum u64
//! ```
//!
//! All integers and floats are little-endian. Checksums are FNV-1a 64 over
//! the record bytes preceding them; the file checksum covers everything
//! before it.

use std::io;
use std::path::Path;

use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("checksum mismatch or truncated data in {0}")]
    Checksum(String),
    #[error("bad magic bytes, expected {expected:?}")]
    Magic { expected: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub header: String,
    pub tensors: Vec<TensorRecord>,
    pub sections: Vec<(String, Vec<u8>)>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Container {
    pub fn new(magic: [u8; 4], header: String) -> Self {
        Self {
            magic,
            version: FORMAT_VERSION,
            header,
            tensors: Vec::new(),
            sections: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let start = out.len();
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let sum = fnv1a64(&out[start..]);
            out.extend_from_slice(&sum.to_le_bytes());
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, bytes) in &self.sections {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
            let sum = fnv1a64(&out[start..]);
            out.extend_from_slice(&sum.to_le_bytes());
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses a container, checking magic, version and every checksum.
    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(ContainerError::Magic { expected: magic });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 || fnv1a64(&bytes[..bytes.len() - 8]) != u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) {
            return Err(ContainerError::Checksum("file".into()));
        }
        let header_len = r.u32()? as usize;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| ContainerError::Malformed("header is not UTF-8".into()))?;
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let start = r.pos;
            let name = r.name()?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| ContainerError::Malformed("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let sum = fnv1a64(&bytes[start..r.pos]);
            if r.u64()? != sum {
                return Err(ContainerError::Checksum(name));
            }
            tensors.push(TensorRecord { name, dims, data });
        }
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let start = r.pos;
            let name = r.name()?;
            let len = r.u64()? as usize;
            let body = r.take(len)?.to_vec();
            let sum = fnv1a64(&bytes[start..r.pos]);
            if r.u64()? != sum {
                return Err(ContainerError::Checksum(name));
            }
            sections.push((name, body));
        }
        if r.pos + 8 != bytes.len() {
            return Err(ContainerError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            magic,
            version,
            header,
            tensors,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ContainerError::Checksum("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, ContainerError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| ContainerError::Malformed("record name is not UTF-8".into()))
    }
}
