//! COPW weight containers and filter/channel slicing.
//!
//! Layout, all integers u32 little-endian, no padding:
//!
//! ```text
//! "COPW" | version = 1 | entry_count
//! per entry: name_len | name (UTF-8) | ndim | ndim × dim | product(dims) × f32 LE
//! ```
//!
//! Conv weights use `[K, K, M, N]`, fully connected `[M, N]`, depthwise `[K, K, M, 1]`.
//! Biases live in `<layer>.bias`; batch norm in `<layer>.{gamma,beta,mean,var}`.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use thiserror::Error;

use crate::model_graph::{LayerKind, LayerSpec, ModelGraph};

pub const MAGIC: &[u8; 4] = b"COPW";
pub const VERSION: u32 = 1;

pub const BN_PARAMS: [&str; 4] = ["gamma", "beta", "mean", "var"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightError {
    #[error("bad magic bytes {0:?}, expected \"COPW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated stream at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("tensor name at byte offset {0} is not valid UTF-8")]
    BadName(usize),
    #[error("duplicate tensor `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: dims {dims:?} do not describe {len} values")]
    DimMismatch { name: String, dims: Vec<usize>, len: usize },
    #[error("tensor `{name}` has no axis {axis} (rank {rank})")]
    Axis { name: String, axis: usize, rank: usize },
    #[error("index {index} out of range for axis of length {len} in `{name}`")]
    IndexOutOfRange { name: String, index: usize, len: usize },
    #[error("removing every index of axis {axis} in `{name}`")]
    RemoveAll { name: String, axis: usize },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has dims {found:?}, layer expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` does not belong to any layer")]
    Unexpected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self, WeightError> {
        let name = name.into();
        let numel = checked_numel(&dims);
        if dims.contains(&0) || numel != Some(data.len()) {
            return Err(WeightError::DimMismatch {
                name,
                dims,
                len: data.len(),
            });
        }
        Ok(WeightTensor { name, dims, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bitwise equality (NaN payloads included).
    pub fn bit_eq(&self, other: &WeightTensor) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Remove the slices `remove` along `axis`, keeping survivors in order.
pub fn slice_tensor(t: &WeightTensor, axis: usize, remove: &BTreeSet<usize>) -> Result<WeightTensor, WeightError> {
    if axis >= t.dims.len() {
        return Err(WeightError::Axis {
            name: t.name.clone(),
            axis,
            rank: t.dims.len(),
        });
    }
    let len = t.dims[axis];
    if let Some(&bad) = remove.iter().find(|&&i| i >= len) {
        return Err(WeightError::IndexOutOfRange {
            name: t.name.clone(),
            index: bad,
            len,
        });
    }
    if remove.len() >= len {
        return Err(WeightError::RemoveAll {
            name: t.name.clone(),
            axis,
        });
    }
    if remove.is_empty() {
        return Ok(t.clone());
    }
    let outer: usize = t.dims[..axis].iter().product();
    let inner: usize = t.dims[axis + 1..].iter().product();
    let keep: Vec<usize> = (0..len).filter(|i| !remove.contains(i)).collect();

    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for &k in &keep {
            let start = base + k * inner;
            data.extend_from_slice(&t.data[start..start + inner]);
        }
    }
    let mut dims = t.dims.clone();
    dims[axis] = keep.len();
    Ok(WeightTensor {
        name: t.name.clone(),
        dims,
        data,
    })
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    entries: IndexMap<String, WeightTensor>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: WeightTensor) -> Result<(), WeightError> {
        if self.entries.contains_key(&t.name) {
            return Err(WeightError::DuplicateName(t.name));
        }
        self.entries.insert(t.name.clone(), t);
        Ok(())
    }

    /// Replace an existing tensor in place, preserving entry order.
    pub fn replace(&mut self, t: WeightTensor) -> Result<(), WeightError> {
        let slot = self
            .entries
            .get_mut(&t.name)
            .ok_or_else(|| WeightError::Missing(t.name.clone()))?;
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &WeightTensor> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of stored floats.
    pub fn param_count(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }

    pub fn bit_eq(&self, other: &WeightContainer) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|(a, b)| a.bit_eq(b))
    }

    /// Check that the container holds exactly the tensors `graph` calls for.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<(), WeightError> {
        let mut expected = 0;
        for layer in graph.layers() {
            for (name, dims) in expected_tensors(layer) {
                expected += 1;
                let t = self.get(&name).ok_or_else(|| WeightError::Missing(name.clone()))?;
                if t.dims != dims {
                    return Err(WeightError::Shape {
                        name,
                        expected: dims,
                        found: t.dims.clone(),
                    });
                }
            }
        }
        if expected != self.len() {
            let known: std::collections::HashSet<String> = graph
                .layers()
                .iter()
                .flat_map(|l| expected_tensors(l).into_iter().map(|(n, _)| n))
                .collect();
            let extra = self.entries.keys().find(|k| !known.contains(*k)).cloned().unwrap_or_default();
            return Err(WeightError::Unexpected(extra));
        }
        Ok(())
    }
}

/// Tensor names and dims a layer owns.
pub fn expected_tensors(l: &LayerSpec) -> Vec<(String, Vec<usize>)> {
    let k = l.kernel as usize;
    let m = l.in_channels as usize;
    let n = l.out_channels as usize;
    let mut out = match l.kind {
        LayerKind::Conv | LayerKind::PointwiseConv => vec![(l.name.clone(), vec![k, k, m, n])],
        LayerKind::Fc => vec![(l.name.clone(), vec![m, n])],
        LayerKind::DepthwiseConv => vec![(l.name.clone(), vec![k, k, m, 1])],
        LayerKind::BatchNorm => {
            return BN_PARAMS.iter().map(|p| (format!("{}.{p}", l.name), vec![n])).collect();
        }
    };
    if l.bias {
        out.push((format!("{}.bias", l.name), vec![n]));
    }
    out
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let rest = self.buf.len() - self.pos;
        if n > rest {
            return Err(WeightError::Truncated {
                offset: self.buf.len(),
                needed: n - rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<WeightContainer, WeightError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4).map_err(|e| {
        if MAGIC.starts_with(bytes) {
            return e;
        }
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        WeightError::BadMagic(m)
    })?;
    if magic != MAGIC {
        return Err(WeightError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(WeightError::Version(version));
    }
    let count = cur.u32()?;
    let mut c = WeightContainer::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name_at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| WeightError::BadName(name_at))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let numel = checked_numel(&dims)
            .filter(|_| dims.iter().all(|&d| d > 0))
            .ok_or_else(|| WeightError::DimMismatch {
                name: name.clone(),
                dims: dims.clone(),
                len: 0,
            })?;
        let nbytes = numel.checked_mul(4).ok_or(WeightError::Truncated {
            offset: bytes.len(),
            needed: usize::MAX,
        })?;
        let payload = cur.take(nbytes)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        c.insert(WeightTensor { name, dims, data })?;
    }
    if cur.pos != bytes.len() {
        return Err(WeightError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(c)
}

pub fn write_container(c: &WeightContainer) -> Vec<u8> {
    let size: usize = 12
        + c.iter()
            .map(|t| 8 + t.name.len() + 4 * t.dims.len() + 4 * t.data.len())
            .sum::<usize>();
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.len() as u32).to_le_bytes());
    for t in c.iter() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
