//! Binary checkpoints: a flat ordered list of named tensors.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "BWSSLCKP" | version | count
//! count x ( name_len | name bytes | ndim | dims... | f32 data... )
//! ```
//!
//! Parameters come first in store order, then batch-norm buffers.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 8] = b"BWSSLCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn entries_of<E: Element>(store: &ParamStore<E>) -> Vec<Entry> {
    let params = store.params().iter().map(|p| (&p.name, &p.value));
    let buffers = store.buffers().iter().map(|b| (&b.name, &b.value));
    params
        .chain(buffers)
        .map(|(name, value)| Entry {
            name: name.clone(),
            tensor: value.cast(),
        })
        .collect()
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.ndim() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of file, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Entry>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(MAGIC.len())? != MAGIC {
        c.pos = 0;
        return Err(c.fail("not a checkpoint file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.fail(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = match std::str::from_utf8(c.take(len)?) {
            Ok(n) => n.to_string(),
            Err(_) => return Err(c.fail("tensor name is not UTF-8")),
        };
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(c.fail(format!("tensor {name} has implausible rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let Some(nbytes) = numel.checked_mul(4) else {
            return Err(c.fail("tensor too large"));
        };
        let raw = c.take(nbytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(Entry {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes after last tensor"));
    }
    Ok(entries)
}

pub fn save<E: Element>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let bytes = encode(&entries_of(store));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies every entry whose name starts with `prefix` into the matching
/// parameter or buffer of `store`. Returns the number of tensors loaded.
pub fn load_into<E: Element>(store: &mut ParamStore<E>, entries: &[Entry], prefix: &str) -> Result<usize> {
    let mut loaded = 0;
    for e in entries.iter().filter(|e| e.name.starts_with(prefix)) {
        let target = if let Some(id) = store.find(&e.name) {
            &mut store.param_mut(id).value
        } else if let Some(id) = store.find_buffer(&e.name) {
            store.buffer_mut(id)
        } else {
            return Err(Error::config(format!(
                "checkpoint tensor {} has no counterpart",
                e.name
            )));
        };
        if target.shape() != e.tensor.shape() {
            return Err(Error::shape(format!(
                "checkpoint tensor {} has shape {:?}, model expects {:?}",
                e.name,
                e.tensor.shape(),
                target.shape()
            )));
        }
        *target = e.tensor.cast();
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Encoder, EncoderSpec};
    use crate::rng::stream;

    #[test]
    fn round_trip_is_bitwise() {
        let mut store = ParamStore::<f32>::new();
        Encoder::new(&mut store, &EncoderSpec::desk(), &mut stream(3, "init", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&store, &path).unwrap();

        let mut other = ParamStore::<f32>::new();
        Encoder::new(&mut other, &EncoderSpec::desk(), &mut stream(4, "init", 0)).unwrap();
        assert_ne!(other.checksum(), store.checksum());
        let entries = read(&path).unwrap();
        let n = load_into(&mut other, &entries, "").unwrap();
        assert_eq!(n, store.params().len() + store.buffers().len());
        assert_eq!(other.checksum(), store.checksum());
    }

    #[test]
    fn prefix_limits_loading() {
        let mut store = ParamStore::<f32>::new();
        Encoder::new(&mut store, &EncoderSpec::desk(), &mut stream(3, "init", 0)).unwrap();
        let entries = entries_of(&store);
        let mut other = ParamStore::<f32>::new();
        Encoder::new(&mut other, &EncoderSpec::desk(), &mut stream(4, "init", 0)).unwrap();
        load_into(&mut other, &entries, "block1/").unwrap();
        let id = other.find("block1/unit1/conv1/weight").unwrap();
        assert_eq!(other.param(id).value, store.param(id).value);
        let id = other.find("block2/unit1/conv1/weight").unwrap();
        assert_ne!(other.param(id).value, store.param(id).value);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let entries = vec![Entry {
            name: "w".into(),
            tensor: Tensor::ones(&[2, 2]),
        }];
        let bytes = encode(&entries);
        let err = decode(&bytes[..bytes.len() - 3], Path::new("x.ckpt")).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset as usize, bytes.len() - 16),
            other => panic!("unexpected {other}"),
        }
        assert!(decode(b"garbage!", Path::new("x")).is_err());
    }
}
