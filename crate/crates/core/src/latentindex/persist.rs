//! Index files: HNSW parameters and the weights fingerprint in the header,
//! unit vectors as one tensor, keys and adjacency lists as byte sections.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HnswParams, IndexError, LatentIndex, Node};
use crate::container::{Container, TensorRecord};

pub const INDEX_MAGIC: [u8; 4] = *b"CGIX";

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    len: usize,
    entry: Option<u32>,
    params: HnswParams,
    weights_fingerprint: u64,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| IndexError::Malformed("section ends early".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl LatentIndex {
    pub fn to_container(&self, weights_fingerprint: u64) -> Container {
        let header = Header {
            dim: self.dim,
            len: self.nodes.len(),
            entry: self.entry,
            params: self.params.clone(),
            weights_fingerprint,
        };
        let mut c = Container::new(
            INDEX_MAGIC,
            serde_json::to_string(&header).expect("header serializes"),
        );
        c.tensors.push(TensorRecord {
            name: "vectors".into(),
            dims: vec![self.nodes.len() as u32, self.dim as u32],
            data: self.nodes.iter().flat_map(|n| n.vector.iter().copied()).collect(),
        });
        let mut keys = Vec::new();
        let mut adjacency = Vec::new();
        for n in &self.nodes {
            keys.extend_from_slice(&(n.key.len() as u16).to_le_bytes());
            keys.extend_from_slice(n.key.as_bytes());
            adjacency.extend_from_slice(&(n.links.len() as u16).to_le_bytes());
            for layer in &n.links {
                adjacency.extend_from_slice(&(layer.len() as u16).to_le_bytes());
                for id in layer {
                    adjacency.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        c.sections.push(("keys".into(), keys));
        c.sections.push(("adjacency".into(), adjacency));
        c
    }

    /// Rebuilds an index from a container and returns it with the stored
    /// weights fingerprint.
    pub fn from_container(c: &Container) -> Result<(Self, u64), IndexError> {
        let header: Header = serde_json::from_str(&c.header)
            .map_err(|e| IndexError::Malformed(format!("header: {e}")))?;
        header.params.validate()?;
        let vectors = c
            .tensor("vectors")
            .ok_or_else(|| IndexError::Malformed("missing vectors".into()))?;
        if vectors.dims != [header.len as u32, header.dim as u32] {
            return Err(IndexError::Malformed(format!(
                "vectors have shape {:?}, header says {}x{}",
                vectors.dims, header.len, header.dim
            )));
        }
        let section = |name: &str| {
            c.section(name)
                .ok_or_else(|| IndexError::Malformed(format!("missing {name} section")))
        };
        let mut keys = Cursor { bytes: section("keys")?, pos: 0 };
        let mut adj = Cursor { bytes: section("adjacency")?, pos: 0 };
        let mut nodes = Vec::with_capacity(header.len);
        let mut by_key = HashMap::with_capacity(header.len);
        for i in 0..header.len {
            let klen = keys.u16()? as usize;
            let key = std::str::from_utf8(keys.take(klen)?)
                .map_err(|_| IndexError::Malformed(format!("key {i} is not UTF-8")))?
                .to_owned();
            let layers = adj.u16()? as usize;
            if layers == 0 {
                return Err(IndexError::Malformed(format!("node {i} has no layers")));
            }
            let mut links = Vec::with_capacity(layers);
            for _ in 0..layers {
                let count = adj.u16()? as usize;
                let layer = (0..count).map(|_| adj.u32()).collect::<Result<Vec<_>, _>>()?;
                links.push(layer);
            }
            if by_key.insert(key.clone(), i as u32).is_some() {
                return Err(IndexError::DuplicateKey(key));
            }
            let vector = vectors.data[i * header.dim..(i + 1) * header.dim].to_vec();
            nodes.push(Node { key, vector, links });
        }
        if !keys.done() || !adj.done() {
            return Err(IndexError::Malformed("trailing section bytes".into()));
        }
        if header.entry.is_some_and(|e| e as usize >= header.len)
            || header.entry.is_none() != (header.len == 0)
        {
            return Err(IndexError::Malformed("bad entry point".into()));
        }
        let index = LatentIndex {
            dim: header.dim,
            params: header.params,
            nodes,
            by_key,
            entry: header.entry,
        };
        index
            .check_integrity()
            .map_err(|e| IndexError::Malformed(format!("graph: {e}")))?;
        Ok((index, header.weights_fingerprint))
    }

    pub fn save(&self, path: &Path, weights_fingerprint: u64) -> Result<(), IndexError> {
        Ok(self.to_container(weights_fingerprint).write(path)?)
    }

    /// Loads an index file and returns it with its weights fingerprint.
    pub fn load(path: &Path) -> Result<(Self, u64), IndexError> {
        Self::from_container(&Container::read(path, INDEX_MAGIC)?)
    }

    /// Loads an index file, refusing one built from different weights.
    pub fn load_for(path: &Path, weights_fingerprint: u64) -> Result<Self, IndexError> {
        let (index, found) = Self::load(path)?;
        if found != weights_fingerprint {
            return Err(IndexError::StaleIndex {
                expected: weights_fingerprint,
                found,
            });
        }
        Ok(index)
    }
}
