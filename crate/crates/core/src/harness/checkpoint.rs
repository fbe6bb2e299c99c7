//! `RIDC` tensor container.
//!
//! Layout (all integers little-endian `u32`): magic `RIDC`, version, entry
//! count, then per entry in name order: name length, UTF-8 name, rank, dims,
//! `f32` payload. A CRC32 of every preceding byte closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"RIDC";
pub const VERSION: u32 = 1;

/// Serialise `entries` (already name-sorted by the map) into bytes.
pub fn encode(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    if bytes.len() < 16 {
        return Err(Error::Malformed("file shorter than header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Malformed(format!("entry name: {e}")))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(Error::Malformed(format!("entries not sorted at `{name}`")));
        }
        let rank = r.u32()? as usize;
        if rank > (body.len() - r.pos) / 4 {
            return Err(Error::Malformed(format!(
                "rank {rank} of `{name}` exceeds the file"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("shape of `{name}` overflows")))?;
        let payload = r.take(bytes)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(e.to_string()))?;
        last = Some(name.clone());
        out.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Malformed("trailing bytes after entries".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(entries: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}

/// Text stored as one byte per `f32`, for metadata entries.
pub fn text_tensor(s: &str) -> Tensor {
    let bytes = s.as_bytes();
    if bytes.is_empty() {
        return Tensor::zeros(&[1]);
    }
    Tensor::from_fn(&[bytes.len()], |i| bytes[i] as f32)
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| v as u8)
        .collect();
    String::from_utf8(bytes).map_err(|e| Error::Malformed(format!("text entry: {e}")))
}

/// Named tensors plus string metadata under a `meta.` prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub tensors: ParamSet,
    pub meta: BTreeMap<String, String>,
}

const META: &str = "meta.";

impl Bundle {
    pub fn new(tensors: ParamSet) -> Self {
        Self {
            tensors,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Malformed(format!("missing metadata `{key}`")))
    }

    fn entries(&self) -> BTreeMap<String, Tensor> {
        let mut entries = self.tensors.0.clone();
        for (k, v) in &self.meta {
            entries.insert(format!("{META}{k}"), text_tensor(v));
        }
        entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.entries())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.entries(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(load_checkpoint(path)?)
    }

    /// Decode in-memory checkpoint bytes; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        Self::from_entries(decode(bytes, origin)?)
    }

    fn from_entries(entries: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = Bundle::default();
        for (name, t) in entries {
            match name.strip_prefix(META) {
                Some(k) => {
                    out.meta.insert(k.to_string(), tensor_text(&t)?);
                }
                None => out.tensors.insert(name, t),
            }
        }
        Ok(out)
    }
}
