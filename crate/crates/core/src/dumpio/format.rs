//! The AAUD activation-dump container.
//!
//! All integers are little-endian. Layout, version 1:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AAUD"
//! 4       2     version (u16) = 1
//! 6       1     dtype (u8): 0 = f32
//! 7       1     endianness (u8): 0 = little
//! 8       4     tensor_count (u32)
//! 12      4     index_len (u32): byte length of the index block
//! 16      4     index_crc (u32): CRC-32 (IEEE) of the index block
//! 20      ...   index block, tensor_count entries:
//!                 name_len (u16), name (UTF-8, name_len bytes),
//!                 rank (u8), dims (u64 × rank), offset (u64, absolute)
//! 20+index_len  data block: each tensor's values as f32, row-major,
//!               packed back to back in index order
//! ```
//!
//! The file ends exactly at the end of the last tensor.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"AAUD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
const DTYPE_F32: u8 = 0;
const LITTLE_ENDIAN: u8 = 0;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (reader supports up to {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported endianness code {0}")]
    UnsupportedEndianness(u8),
    #[error("file truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("index checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed index: {0}")]
    BadIndex(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{0}` lies outside the data block")]
    OutOfBounds(String),
    #[error("tensors `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{name}` has {values} values but dims {dims:?}")]
    DataLength {
        name: String,
        values: usize,
        dims: Vec<usize>,
    },
    #[error("too large for the format: {0}")]
    TooLarge(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl FormatError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic(_) => "bad_magic",
            FormatError::UnsupportedVersion { .. } => "bad_version",
            FormatError::UnsupportedDtype(_) => "bad_dtype",
            FormatError::UnsupportedEndianness(_) => "bad_endianness",
            FormatError::Truncated { .. } => "truncated",
            FormatError::Checksum { .. } => "checksum",
            FormatError::BadIndex(_) => "bad_index",
            FormatError::DuplicateName(_) => "duplicate_name",
            FormatError::OutOfBounds(_) => "out_of_bounds",
            FormatError::Overlap(..) => "overlap",
            FormatError::TrailingBytes(_) => "trailing_bytes",
            FormatError::DataLength { .. } => "data_length",
            FormatError::TooLarge(_) => "too_large",
            FormatError::Io(_) => "io",
        }
    }
}

/// A dense f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self { dims, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Self {
        Self {
            dims,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Bit-level equality, so NaN payloads compare too.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct TensorSet {
    entries: Vec<(String, Tensor)>,
    lookup: HashMap<String, usize>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), FormatError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        self.lookup.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn bitwise_eq(&self, other: &TensorSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }
}

/// Serializes `tensors` to the AAUD byte layout.
pub fn encode(tensors: &TensorSet) -> Result<Vec<u8>, FormatError> {
    let count =
        u32::try_from(tensors.len()).map_err(|_| FormatError::TooLarge("tensor count".into()))?;

    let mut index_len = 0usize;
    for (name, t) in tensors.iter() {
        if name.len() > usize::from(u16::MAX) {
            return Err(FormatError::TooLarge(format!(
                "name of length {}",
                name.len()
            )));
        }
        if t.dims.len() > usize::from(u8::MAX) {
            return Err(FormatError::TooLarge(format!("rank {}", t.dims.len())));
        }
        if t.element_count() != t.data.len() {
            return Err(FormatError::DataLength {
                name: name.to_string(),
                values: t.data.len(),
                dims: t.dims.clone(),
            });
        }
        index_len += 2 + name.len() + 1 + 8 * t.dims.len() + 8;
    }
    let index_len_u32 =
        u32::try_from(index_len).map_err(|_| FormatError::TooLarge("index".into()))?;

    let mut index = Vec::with_capacity(index_len);
    let mut offset = (HEADER_LEN + index_len) as u64;
    for (name, t) in tensors.iter() {
        index.extend_from_slice(&(name.len() as u16).to_le_bytes());
        index.extend_from_slice(name.as_bytes());
        index.push(t.dims.len() as u8);
        for &d in &t.dims {
            index.extend_from_slice(&(d as u64).to_le_bytes());
        }
        index.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    debug_assert_eq!(index.len(), index_len);

    let mut out = Vec::with_capacity(offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(LITTLE_ENDIAN);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&index_len_u32.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&index).to_le_bytes());
    out.extend_from_slice(&index);
    for (_, t) in tensors.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::BadIndex("entry runs past the index block".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct IndexEntry {
    name: String,
    dims: Vec<usize>,
    start: usize,
    end: usize,
}

/// Parses and fully validates an AAUD byte buffer.
pub fn decode(bytes: &[u8]) -> Result<TensorSet, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version == 0 || version > VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    if bytes[6] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(bytes[6]));
    }
    if bytes[7] != LITTLE_ENDIAN {
        return Err(FormatError::UnsupportedEndianness(bytes[7]));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let index_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let stored_crc = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let data_start = HEADER_LEN + index_len;
    if bytes.len() < data_start {
        return Err(FormatError::Truncated {
            needed: data_start,
            actual: bytes.len(),
        });
    }
    let index = &bytes[HEADER_LEN..data_start];
    let computed = crc32fast::hash(index);
    if computed != stored_crc {
        return Err(FormatError::Checksum {
            stored: stored_crc,
            computed,
        });
    }

    let mut cur = Cursor {
        bytes: index,
        pos: 0,
    };
    let mut entries: Vec<IndexEntry> = Vec::with_capacity(count.min(1 << 16));
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = usize::from(cur.u16()?);
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| FormatError::BadIndex("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName(name));
        }
        let rank = usize::from(cur.u8()?);
        let mut dims = Vec::with_capacity(rank);
        let mut elements = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(cur.u64()?)
                .map_err(|_| FormatError::BadIndex(format!("dimension of `{name}` too large")))?;
            elements = elements
                .checked_mul(d)
                .ok_or_else(|| FormatError::BadIndex(format!("`{name}` is too large")))?;
            dims.push(d);
        }
        let start =
            usize::try_from(cur.u64()?).map_err(|_| FormatError::OutOfBounds(name.clone()))?;
        let end = elements
            .checked_mul(4)
            .and_then(|n| start.checked_add(n))
            .ok_or_else(|| FormatError::OutOfBounds(name.clone()))?;
        if start < data_start {
            return Err(FormatError::OutOfBounds(name));
        }
        entries.push(IndexEntry {
            name,
            dims,
            start,
            end,
        });
    }
    if cur.pos != index.len() {
        return Err(FormatError::BadIndex(format!(
            "{} unused bytes at the end of the index",
            index.len() - cur.pos
        )));
    }

    let mut by_start: Vec<&IndexEntry> = entries.iter().collect();
    by_start.sort_by_key(|e| (e.start, e.end));
    for pair in by_start.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(FormatError::Overlap(
                pair[0].name.clone(),
                pair[1].name.clone(),
            ));
        }
    }
    let data_end = entries.iter().map(|e| e.end).max().unwrap_or(data_start);
    if bytes.len() < data_end {
        return Err(FormatError::Truncated {
            needed: data_end,
            actual: bytes.len(),
        });
    }
    if bytes.len() > data_end {
        return Err(FormatError::TrailingBytes(bytes.len() - data_end));
    }

    let mut set = TensorSet::new();
    for e in entries {
        let data = bytes[e.start..e.end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set.insert(e.name, Tensor::new(e.dims, data))?;
    }
    Ok(set)
}

pub fn write_dump(tensors: &TensorSet, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<TensorSet, FormatError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_encodes_header_only() {
        let bytes = encode(&TensorSet::new()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[0..4], b"AAUD");
        assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut s = TensorSet::new();
        s.insert("a", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::vector(vec![2.0])),
            Err(FormatError::DuplicateName(_))
        ));
    }

    #[test]
    fn dims_must_match_data() {
        let mut s = TensorSet::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0; 3]))
            .unwrap();
        assert!(matches!(encode(&s), Err(FormatError::DataLength { .. })));
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = encode(&TensorSet::new()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes),
            Err(FormatError::UnsupportedVersion { found: 2 })
        ));
    }
}
