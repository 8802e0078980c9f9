//! Named parameter storage and the key→array file format.
//!
//! Array files (checkpoints, attention dumps) are little-endian binary:
//!
//! ```text
//! magic    8 bytes  "CLIPVOS\0"
//! version  u32      currently 1
//! header   u32 length + UTF-8 bytes (config text for checkpoints, may be empty)
//! count    u32
//! entries  count × { u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//!                    prod(dims) × f64 }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CLIPVOS\0";
pub const ARRAY_FILE_VERSION: u32 = 1;

/// Coarse grouping used by the optimizer and the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Matching,
    Rte,
    Pyramid,
    Decoder,
    TimeEmbedding,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Matching,
        ParamGroup::Rte,
        ParamGroup::Pyramid,
        ParamGroup::Decoder,
        ParamGroup::TimeEmbedding,
    ];

    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or("") {
            "backbone" => ParamGroup::Backbone,
            "match" => ParamGroup::Matching,
            "rte" => ParamGroup::Rte,
            "pyramid" => ParamGroup::Pyramid,
            "time_embed" => ParamGroup::TimeEmbedding,
            _ => ParamGroup::Decoder,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Matching => "matching",
            ParamGroup::Rte => "rte",
            ParamGroup::Pyramid => "pyramid",
            ParamGroup::Decoder => "decoder",
            ParamGroup::TimeEmbedding => "time_embed",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Lookup that treats a missing name as a wiring bug.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn num_scalars_in(&self, group: ParamGroup) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| ParamGroup::of(k) == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Graph leaf for a stored parameter.
    pub fn var(&self, g: &Graph, name: &str) -> Var {
        g.param(name, self.expect(name))
    }

    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        write_array_file(path, header, &self.tensors)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (header, tensors) = read_array_file(path)?;
        Ok((Self { tensors }, header))
    }
}

/// He-normal weights for a `[fan_in, fan_out]` matrix.
pub fn he_normal(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, &[fan_in, fan_out], std)
}

/// Xavier-uniform weights for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-a..a))
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn write_array_file(path: &Path, header: &str, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ARRAY_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("array file", "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("array file", "non UTF-8 string"))
    }
}

pub fn read_array_file(path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::format("array file", "bad magic"));
    }
    let version = c.u32()?;
    if version != ARRAY_FILE_VERSION {
        return Err(Error::format("array file", format!("unsupported version {version}")));
    }
    let header = c.string()?;
    let count = c.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        arrays.insert(name, Tensor::new(dims, data));
    }
    if c.pos != buf.len() {
        return Err(Error::format("array file", "trailing bytes"));
    }
    Ok((header, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_prefix() {
        assert_eq!(ParamGroup::of("backbone.stage0.weight"), ParamGroup::Backbone);
        assert_eq!(ParamGroup::of("rte.e3"), ParamGroup::Rte);
        assert_eq!(ParamGroup::of("match.s32.h0.wq"), ParamGroup::Matching);
        assert_eq!(ParamGroup::of("decoder.block0.ffn1.weight"), ParamGroup::Decoder);
        assert_eq!(ParamGroup::of("time_embed"), ParamGroup::TimeEmbedding);
    }

    #[test]
    fn array_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut store = ParamStore::new();
        store.insert("x.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0));
        store.insert("s", Tensor::scalar(f64::MIN_POSITIVE));
        store.save(&path, "k = v\n").unwrap();
        let (back, header) = ParamStore::load(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(header, "k = v\n");

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Format { .. })));
    }
}
