//! Single-file container of named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "FBPCARR\x01"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          data section
//! ```
//!
//! The header is `{"format": "fbpc-array", "version": 1, "meta": {...},
//! "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}`. `dtype` is
//! `"f64"` or `"i64"`; `offset` is relative to the start of the data
//! section. Array payloads are row-major with no padding.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FbpcError, Result};

pub const MAGIC: &[u8; 8] = b"FBPCARR\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::I64(data),
        }
    }

    pub fn labels(name: impl Into<String>, labels: &[usize]) -> Self {
        Self::i64(
            name,
            vec![labels.len()],
            labels.iter().map(|&v| v as i64).collect(),
        )
    }

    pub fn dtype(&self) -> &'static str {
        match self.data {
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as `f64`; integer arrays are converted.
    pub fn as_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_labels(&self, path: &Path) -> Result<Vec<usize>> {
        match &self.data {
            ArrayData::I64(v) => v
                .iter()
                .map(|&x| {
                    usize::try_from(x).map_err(|_| {
                        FbpcError::format(path, format!("negative label in {}", self.name))
                    })
                })
                .collect(),
            ArrayData::F64(_) => Err(FbpcError::format(
                path,
                format!("{} must be an i64 array", self.name),
            )),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: BTreeMap<String, serde_json::Value>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str, path: &Path) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| FbpcError::format(path, format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let nbytes = 8 * a.len() as u64;
                let e = ArrayEntry {
                    name: a.name.clone(),
                    dtype: a.dtype().into(),
                    shape: a.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        let header = Header {
            format: "fbpc-array".into(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(FbpcError::format(path, "not an fbpc array container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| FbpcError::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| FbpcError::format(path, format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(FbpcError::format(
                path,
                format!("unsupported version {}", header.version),
            ));
        }
        let data = &bytes[data_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let count: usize = e.shape.iter().product();
            let (start, len) = (e.offset as usize, e.nbytes as usize);
            if len != 8 * count || start.checked_add(len).is_none_or(|end| end > data.len()) {
                return Err(FbpcError::format(
                    path,
                    format!("array `{}` has inconsistent extent", e.name),
                ));
            }
            let words = data[start..start + len]
                .chunks_exact(8)
                .map(|c| c.try_into().expect("8 bytes"));
            let payload = match e.dtype.as_str() {
                "f64" => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
                "i64" => ArrayData::I64(words.map(i64::from_le_bytes).collect()),
                other => return Err(FbpcError::format(path, format!("unknown dtype `{other}`"))),
            };
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: payload,
            });
        }
        Ok(ArrayFile {
            meta: header.meta,
            arrays,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FbpcError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Write via a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| FbpcError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FbpcError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| FbpcError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| FbpcError::io(path, e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| FbpcError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| FbpcError::format(path, e.to_string()))
}
