//! Versioned binary container for models and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"APLNETAR"
//! 8       4     u32    format version (1)
//! 12      4     u32    spec length L, then L bytes of UTF-8 network spec text
//! ..      4     u32    metadata length L, then L bytes of UTF-8 `key=value` lines
//! ..      4     u32    tensor count T, then T records:
//!                        u32 name length, name bytes (UTF-8)
//!                        u32 rank R, R × u64 extents
//!                        product(extents) × f64 payload
//! ```
//!
//! Tensor names used by this crate:
//!
//! - `layer<i>.weight`, `layer<i>.bias`, `layer<i>.apl_a`, `layer<i>.apl_b`:
//!   parameters of layer `i` of the network spec
//! - `init/<name>`: APL parameters at initialisation
//! - `velocity/<name>`: momentum buffers (checkpoints only)
//! - `normalization/mean`: per-feature training means subtracted from inputs
//!
//! Metadata of a checkpoint holds `kind=checkpoint`, `epoch` and `step`.
//! Readers ignore tensors and keys they do not know.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"APLNETAR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub spec: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.spec);
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(r.error(0, "not an aplnet archive (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(8, format!("unsupported archive version {version}")));
        }
        let spec = r.string()?;
        let meta_at = r.pos;
        let meta = r.string()?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error(meta_at as u64, format!("metadata line {line:?} lacks `=`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.error(at as u64, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Self {
            spec,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn error(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error(at as u64, "invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut metadata = BTreeMap::new();
        metadata.insert("epoch".to_string(), "3".to_string());
        Archive {
            spec: "input 2\ndense 1\n".into(),
            metadata,
            tensors: vec![
                NamedTensor { name: "w".into(), shape: vec![2, 1], data: vec![0.5, -1.25] },
                NamedTensor { name: "empty".into(), shape: vec![3, 0], data: vec![] },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 16);
    }

    #[test]
    fn round_trip() {
        let a = sample();
        assert_eq!(Archive::from_bytes(&a.to_bytes(), Path::new("x")).unwrap(), a);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 4];
        match Archive::from_bytes(cut, Path::new("m.bin")) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Archive::from_bytes(b"NOTANARCHIVE", Path::new("m.bin")),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
