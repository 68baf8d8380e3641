//! Binary interchange format for named tensors (`.cplt`) and the JSON dataset
//! manifest (`.manifest.json`) that travels alongside it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CPLT" | version u32 | entry count u32
//! per entry: name length u32 | name (UTF-8) | dtype u8 | ndim u8 | shape u64 x ndim | payload
//! ```
//!
//! Payloads are row-major; dtype 0 is `f32`, dtype 1 is `u32`.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CPLT";
pub const VERSION: u32 = 1;
pub const BUNDLE_EXTENSION: &str = "cplt";
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const MAX_NDIM: usize = 3;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("entry `{name}`: shape {shape:?} needs {expected} payload bytes, {available} available")]
    PayloadMismatch { name: String, shape: Vec<u64>, expected: u128, available: usize },
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("stream truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("entry `{name}` has rank {ndim}, expected 1..={MAX_NDIM}")]
    BadRank { name: String, ndim: usize },
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("entry `{name}`: expected {expected}")]
    WrongKind { name: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, StoreError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U32),
            other => Err(StoreError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

#[derive(Clone, Debug)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Payload equality is bitwise so NaN payloads still compare equal to themselves.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U32(a), TensorData::U32(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), shape: shape.iter().map(|&s| s as u64).collect(), data: TensorData::F32(data) }
    }

    pub fn u32(name: impl Into<String>, shape: &[usize], data: Vec<u32>) -> Self {
        Self { name: name.into(), shape: shape.iter().map(|&s| s as u64).collect(), data: TensorData::U32(data) }
    }

    pub fn element_count(&self) -> Option<u128> {
        self.shape.iter().try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.shape.is_empty() || self.shape.len() > MAX_NDIM {
            return Err(StoreError::BadRank { name: self.name.clone(), ndim: self.shape.len() });
        }
        let expected = self.element_count().unwrap_or(u128::MAX).saturating_mul(4);
        let available = self.data.len() * self.data.dtype().size();
        if expected != available as u128 {
            return Err(StoreError::PayloadMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                expected,
                available,
            });
        }
        Ok(())
    }

    pub fn shape_usize(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }
}

/// An ordered collection of uniquely named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorBundle {
    pub version: u32,
    pub entries: Vec<Tensor>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self { version: VERSION, entries: Vec::new() }
    }

    pub fn with(mut self, tensor: Tensor) -> Self {
        self.entries.push(tensor);
        self
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.entries.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, StoreError> {
        self.get(name).ok_or_else(|| StoreError::MissingEntry(name.to_string()))
    }

    /// Returns the shape and data of an `f32` entry of rank `ndim`.
    pub fn f32_entry(&self, name: &str, ndim: usize) -> Result<(Vec<usize>, &[f32]), StoreError> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::F32(v) if t.shape.len() == ndim => Ok((t.shape_usize(), v)),
            _ => Err(StoreError::WrongKind { name: name.to_string(), expected: format!("f32 of rank {ndim}") }),
        }
    }

    pub fn u32_entry(&self, name: &str, ndim: usize) -> Result<(Vec<usize>, &[u32]), StoreError> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::U32(v) if t.shape.len() == ndim => Ok((t.shape_usize(), v)),
            _ => Err(StoreError::WrongKind { name: name.to_string(), expected: format!("u32 of rank {ndim}") }),
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.version != VERSION {
            return Err(StoreError::UnsupportedVersion(self.version));
        }
        let mut seen = HashSet::new();
        for t in &self.entries {
            if !seen.insert(t.name.as_str()) {
                return Err(StoreError::DuplicateName(t.name.clone()));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        write_bundle(self, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        parse(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize, StoreError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let file = std::fs::File::open(path)?;
        read_bundle(std::io::BufReader::new(file))
    }
}

/// Serializes `bundle`, returning the number of bytes written. The bundle is
/// validated first, so an invalid bundle writes nothing.
pub fn write_bundle<W: Write>(bundle: &TensorBundle, mut sink: W) -> Result<usize, StoreError> {
    bundle.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&bundle.version.to_le_bytes());
    buf.extend_from_slice(&(bundle.entries.len() as u32).to_le_bytes());
    for t in &bundle.entries {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.data.dtype().code());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

/// Reads one complete bundle from `source`. Any malformed or truncated input is
/// an error; trailing bytes after the last entry are rejected as well.
pub fn read_bundle<R: Read>(mut source: R) -> Result<TensorBundle, StoreError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(StoreError::Truncated { offset: self.bytes.len(), what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn parse(bytes: &[u8]) -> Result<TensorBundle, StoreError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = cur.u32("entry count")?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?).map_err(|_| StoreError::BadName)?.to_string();
        if !seen.insert(name.clone()) {
            return Err(StoreError::DuplicateName(name));
        }
        let dtype = Dtype::from_code(cur.u8("dtype")?)?;
        let ndim = cur.u8("rank")? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(StoreError::BadRank { name, ndim });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64("shape")?);
        }
        let expected = shape
            .iter()
            .try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
            .map(|n| n.saturating_mul(dtype.size() as u128))
            .unwrap_or(u128::MAX);
        if expected > cur.remaining() as u128 {
            return Err(StoreError::PayloadMismatch { name, shape, expected, available: cur.remaining() });
        }
        let payload = cur.take(expected as usize, "payload")?;
        let words = payload.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let data = match dtype {
            Dtype::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            Dtype::U32 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
        };
        entries.push(Tensor { name, shape, data });
    }
    if cur.remaining() != 0 {
        return Err(StoreError::TrailingBytes(cur.remaining()));
    }
    Ok(TensorBundle { version, entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Sample and class metadata for one dataset. Row `i` of every per-sample
/// tensor belongs to `sample_ids[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_ids: Vec<String>,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub open_set_class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slide_of: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub split: Split,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_open_set(&self) -> usize {
        self.open_set_class_names.len()
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        let mut ids = HashSet::new();
        for id in &self.sample_ids {
            if !ids.insert(id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id `{id}`")));
            }
        }
        if self.class_names.is_empty() {
            return Err(Error::Manifest("no target classes".into()));
        }
        let mut classes = HashSet::new();
        for c in &self.class_names {
            if !classes.insert(c.as_str()) {
                return Err(Error::Manifest(format!("duplicate class name `{c}`")));
            }
        }
        let mut open = HashSet::new();
        for c in &self.open_set_class_names {
            if classes.contains(c.as_str()) {
                return Err(Error::Manifest(format!("open-set class `{c}` is also a target class")));
            }
            if !open.insert(c.as_str()) {
                return Err(Error::Manifest(format!("duplicate open-set class `{c}`")));
            }
        }
        if let Some(slide_of) = &self.slide_of {
            if let Some(id) = self.sample_ids.iter().find(|id| !slide_of.contains_key(*id)) {
                return Err(Error::Manifest(format!("sample `{id}` has no slide")));
            }
        }
        Ok(())
    }

    /// Slide IDs in order of first appearance, with the row indices of their patches.
    pub fn slides(&self) -> Option<Vec<(String, Vec<usize>)>> {
        let slide_of = self.slide_of.as_ref()?;
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut position: std::collections::HashMap<&str, usize> = Default::default();
        for (i, id) in self.sample_ids.iter().enumerate() {
            let slide = slide_of.get(id)?;
            let k = *position.entry(slide.as_str()).or_insert_with(|| {
                order.push((slide.clone(), Vec::new()));
                order.len() - 1
            });
            order[k].1.push(i);
        }
        Some(order)
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
