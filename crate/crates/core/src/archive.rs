//! Self-describing binary archive of named arrays.
//!
//! ```text
//! "FONNCKPT" | u32 version | u32 entry count
//! entry: u16 name length | name (UTF-8) | u8 dtype | u64 rank | u64 extents... | payload
//! ```
//!
//! All integers and floats are little-endian. Dtype 0 is f64, 1 is u64 and 2
//! is raw bytes (rank 1).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FONNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    U64 { shape: Vec<usize>, data: Vec<u64> },
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U64 { .. } => 1,
            Payload::Bytes(_) => 2,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Payload::F64(t) => t.shape().to_vec(),
            Payload::U64 { shape, .. } => shape.clone(),
            Payload::Bytes(b) => vec![b.len()],
        }
    }
}

/// Ordered collection of named entries. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Payload)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Inserts or replaces `name`.
    pub fn put(&mut self, name: impl Into<String>, payload: Payload) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = payload,
            None => self.entries.push((name, payload)),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.put(name, Payload::F64(t.clone()));
    }

    pub fn put_f64s(&mut self, name: impl Into<String>, data: &[f64]) {
        self.put(name, Payload::F64(Tensor::new(vec![data.len()], data.to_vec()).unwrap()));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, data: &[u64]) {
        self.put(
            name,
            Payload::U64 {
                shape: vec![data.len()],
                data: data.to_vec(),
            },
        );
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, data: &[u8]) {
        self.put(name, Payload::Bytes(data.to_vec()));
    }

    pub fn put_str(&mut self, name: impl Into<String>, text: &str) {
        self.put_bytes(name, text.as_bytes());
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    fn missing(name: &str) -> Error {
        Error::CorruptState(format!("missing entry {name:?}"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Payload::F64(t)) => Ok(t),
            Some(_) => Err(Error::CorruptState(format!("entry {name:?} is not f64"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        self.tensor(name).map(Tensor::data)
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Payload::U64 { data, .. }) => Ok(data),
            Some(_) => Err(Error::CorruptState(format!("entry {name:?} is not u64"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            v => Err(Error::CorruptState(format!(
                "entry {name:?} holds {} values, expected 1",
                v.len()
            ))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Payload::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::CorruptState(format!("entry {name:?} is not raw bytes"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes(name)?)
            .map_err(|_| Error::CorruptState(format!("entry {name:?} is not UTF-8")))
    }

    /// Entries whose names start with `prefix`, in insertion order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Payload)> {
        self.entries
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, p)| (n.as_str(), p))
    }

    /// Moves every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: Archive) {
        for (n, p) in other.entries {
            self.put(format!("{prefix}{n}"), p);
        }
    }

    /// Entries under `prefix` with the prefix stripped.
    pub fn sub_archive(&self, prefix: &str) -> Archive {
        Archive {
            entries: self
                .with_prefix(prefix)
                .map(|(n, p)| (n[prefix.len()..].to_string(), p.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(payload.tag());
            let shape = payload.shape();
            out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for e in &shape {
                out.extend_from_slice(&(*e as u64).to_le_bytes());
            }
            match payload {
                Payload::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptState("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptState("entry name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u64()? as usize;
            if rank > 16 {
                return Err(Error::CorruptState(format!("entry {name:?} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::CorruptState(format!("entry {name:?} extents overflow")))?;
            let payload = match tag {
                0 => {
                    let data = r.words(numel)?.map(f64::from_le_bytes).collect();
                    Payload::F64(Tensor::new(shape, data).map_err(|e| Error::CorruptState(e.to_string()))?)
                }
                1 => Payload::U64 {
                    data: r.words(numel)?.map(u64::from_le_bytes).collect(),
                    shape,
                },
                2 if rank == 1 => Payload::Bytes(r.take(numel)?.to_vec()),
                _ => return Err(Error::CorruptState(format!("entry {name:?} has dtype {tag}"))),
            };
            if archive.get(&name).is_some() {
                return Err(Error::CorruptState(format!("duplicate entry {name:?}")));
            }
            archive.entries.push((name, payload));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptState(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptState(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn words(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; 8]> + 'a> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::CorruptState("payload size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| c.try_into().unwrap()))
    }
}
