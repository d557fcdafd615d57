//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PYLO" | u32 version | u64 header_len | header (UTF-8 JSON) | zero pad to 8 | payload
//! ```
//!
//! The JSON header lists `metadata` (string -> string) and `tensors`, each with
//! `name`, `dtype`, `shape`, `offset` and `length`. Offsets are relative to the
//! payload start and are multiples of 8.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PYLO";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE_LEN: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"PYLO\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated container: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes, payload has {found}")]
    PayloadMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("tensor `{name}` has dtype {found:?}, expected {expected:?}")]
    WrongDType {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    U64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U64 => 8,
        }
    }
}

/// One raw tensor: dtype, shape and little-endian payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn expected_bytes(dtype: DType, shape: &[usize]) -> Option<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))?
        .checked_mul(dtype.size())
}

impl TensorEntry {
    /// Builds an entry from raw bytes, checking the byte length against the shape.
    pub fn new(name: &str, dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self, FormatError> {
        let expected = expected_bytes(dtype, &shape).ok_or_else(|| {
            FormatError::MalformedHeader(format!("tensor `{name}`: shape {shape:?} overflows"))
        })?;
        if expected != bytes.len() {
            return Err(FormatError::PayloadMismatch {
                name: name.to_string(),
                shape,
                expected,
                found: bytes.len(),
            });
        }
        Ok(Self { dtype, shape, bytes })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: DType::F32,
            shape,
            bytes,
        }
    }

    pub fn from_u64(shape: Vec<usize>, values: &[u64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: DType::U64,
            shape,
            bytes,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, FormatError> {
        self.expect_dtype(DType::F32)?;
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_u64(&self) -> Result<Vec<u64>, FormatError> {
        self.expect_dtype(DType::U64)?;
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn expect_dtype(&self, expected: DType) -> Result<(), FormatError> {
        if self.dtype != expected {
            return Err(FormatError::WrongDType {
                name: String::new(),
                expected,
                found: self.dtype,
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<HeaderEntry>,
}

/// An ordered collection of uniquely named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NamedTensorFile {
    entries: Vec<(String, TensorEntry)>,
    metadata: BTreeMap<String, String>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl NamedTensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<(), FormatError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(FormatError::DuplicateName(name));
        }
        self.entries.push((name, entry));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry, FormatError> {
        self.get(name)
            .ok_or_else(|| FormatError::MissingEntry(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, TensorEntry)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Serializes to the container byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut seen = std::collections::HashSet::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0usize;
        for (name, entry) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(FormatError::DuplicateName(name.clone()));
            }
            tensors.push(HeaderEntry {
                name: name.clone(),
                dtype: entry.dtype,
                shape: entry.shape.clone(),
                offset: offset as u64,
                length: entry.bytes.len() as u64,
            });
            offset = align_up(offset + entry.bytes.len());
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;

        let payload_start = align_up(PREAMBLE_LEN + header.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(payload_start, 0);
        for (_, entry) in &self.entries {
            out.extend_from_slice(&entry.bytes);
            out.resize(align_up(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let found = buf.len() as u64;
        if buf.len() < PREAMBLE_LEN {
            if buf.len() >= 4 && &buf[..4] != MAGIC {
                return Err(FormatError::BadMagic(buf[..4].try_into().unwrap()));
            }
            return Err(FormatError::Truncated {
                needed: PREAMBLE_LEN as u64,
                found,
            });
        }
        let magic: [u8; 4] = buf[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let header_end = (PREAMBLE_LEN as u64)
            .checked_add(header_len)
            .ok_or_else(|| FormatError::MalformedHeader("header length overflows".into()))?;
        if header_end > found {
            return Err(FormatError::Truncated {
                needed: header_end,
                found,
            });
        }
        let header_bytes = &buf[PREAMBLE_LEN..header_end as usize];
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;

        let payload_start = align_up(header_end as usize);
        let mut file = NamedTensorFile {
            entries: Vec::with_capacity(header.tensors.len()),
            metadata: header.metadata,
        };
        for h in header.tensors {
            if h.offset % ALIGN as u64 != 0 {
                return Err(FormatError::MalformedHeader(format!(
                    "tensor `{}` offset {} is not 8-byte aligned",
                    h.name, h.offset
                )));
            }
            let start = (payload_start as u64)
                .checked_add(h.offset)
                .ok_or_else(|| FormatError::MalformedHeader("offset overflows".into()))?;
            let end = start
                .checked_add(h.length)
                .ok_or_else(|| FormatError::MalformedHeader("length overflows".into()))?;
            if end > found {
                return Err(FormatError::Truncated { needed: end, found });
            }
            let bytes = buf[start as usize..end as usize].to_vec();
            let entry = TensorEntry::new(&h.name, h.dtype, h.shape, bytes)?;
            file.insert(h.name, entry)?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `entries` and `meta` to `path`. Fails on duplicate names.
pub fn file_save(
    entries: &[(String, TensorEntry)],
    meta: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    let mut file = NamedTensorFile::new();
    for (name, entry) in entries {
        file.insert(name.clone(), entry.clone())?;
    }
    for (k, v) in meta {
        file.set_meta(k.clone(), v.clone());
    }
    file.save(path)
}

pub fn file_load(
    path: impl AsRef<Path>,
) -> Result<(Vec<(String, TensorEntry)>, BTreeMap<String, String>), FormatError> {
    let file = NamedTensorFile::load(path)?;
    Ok((file.entries, file.metadata))
}
