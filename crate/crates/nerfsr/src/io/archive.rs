//! Checkpoint archive: named f64 arrays behind a JSON header.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, the
//! UTF-8 JSON header, then all array payloads concatenated as little-endian
//! f64. Writes go to a sibling temp file followed by an atomic rename, so a
//! failed save never corrupts the previous checkpoint. Round-trips are
//! bitwise (payload bytes are preserved exactly, including NaN patterns).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: [u8; 8] = *b"nsr-arch";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the payload, in elements.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// An in-memory archive of named arrays plus structured metadata.
#[derive(Debug, Clone)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<(ArrayEntry, Vec<f64>)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Archive { kind: kind.into(), meta: serde_json::Value::Null, entries: Vec::new() }
    }

    pub fn with_meta<T: Serialize>(kind: impl Into<String>, meta: &T) -> Result<Self> {
        Ok(Archive {
            kind: kind.into(),
            meta: serde_json::to_value(meta)?,
            entries: Vec::new(),
        })
    }

    /// Appends an array; names must be unique within the archive.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        let name = name.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "array {name}: shape {shape:?} vs {} elements", data.len());
        assert!(
            self.entries.iter().all(|(e, _)| e.name != name),
            "duplicate array name {name}"
        );
        let entry = ArrayEntry {
            name,
            shape: shape.to_vec(),
            dtype: "f64".into(),
            offset: 0, // assigned at write time
        };
        self.entries.push((entry, data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
    }

    /// Like `get`, but a missing name is an error mentioning the archive kind.
    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name).ok_or_else(|| {
            Error::Missing(format!("array '{name}' in '{}' archive", self.kind))
        })
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    /// Serializes to `path` via temp file + rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (entry, data) in &self.entries {
            let mut e = entry.clone();
            e.offset = offset;
            offset += data.len() as u64;
            arrays.push(e);
        }
        let header = Header {
            format_version: ARCHIVE_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut write = |buf: &[u8]| f.write_all(buf).map_err(|e| Error::io(&tmp, e));
            write(&ARCHIVE_MAGIC)?;
            write(&ARCHIVE_VERSION.to_le_bytes())?;
            write(&(header_bytes.len() as u64).to_le_bytes())?;
            write(&header_bytes)?;
            for (_, data) in &self.entries {
                let mut bytes = Vec::with_capacity(data.len() * 8);
                for v in data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                write(&bytes)?;
            }
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Archive> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let fail = |reason: &str| Error::archive(path, reason);
        if buf.len() < 20 {
            return Err(fail("truncated: shorter than the fixed prelude"));
        }
        if buf[..8] != ARCHIVE_MAGIC {
            return Err(fail("bad magic: not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(fail(&format!(
                "format version {version} unsupported (expected {ARCHIVE_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let payload_start = 20 + header_len;
        if buf.len() < payload_start {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&buf[20..payload_start])?;
        if header.format_version != version {
            return Err(fail("header format_version disagrees with prelude"));
        }
        let payload = &buf[payload_start..];
        let mut entries = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            if entry.dtype != "f64" {
                return Err(fail(&format!("array {}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(fail(&format!("array {} extends past payload", entry.name)));
            }
            let mut data = Vec::with_capacity(n);
            for chunk in payload[start..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            entries.push((entry, data));
        }
        Ok(Archive { kind: header.kind, meta: header.meta, entries })
    }
}
