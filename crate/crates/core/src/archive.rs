//! Activation tensors, archives and the `ACTV` container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ACTV"                      4 bytes magic
//! version: u32                currently 1
//! meta_len: u32, meta JSON    UTF-8 JSON object
//! n: u32, n x (u16 len, id)   example identifiers
//! layer_count: u32
//! per layer:
//!   u16 len, layer id (UTF-8)
//!   rank: u8 (2 or 4)
//!   rank x u64 dims           dims[0] == n
//!   prod(dims) x f32          row-major payload
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"ACTV";
pub const FORMAT_VERSION: u32 = 1;

/// Activations of one layer over a fixed example set, stored as `f32`.
///
/// Shape is either `(n, p)` or `(n, h, w, c)`; the payload is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    layer_id: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(layer_id: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let layer_id = layer_id.into();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::Format(format!(
                "layer `{layer_id}` has rank {}, expected 2 or 4",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Format(format!(
                "layer `{layer_id}` has a zero dimension in {shape:?}"
            )));
        }
        let expected = checked_product(&shape).ok_or_else(|| {
            Error::Format(format!("layer `{layer_id}` shape {shape:?} overflows"))
        })?;
        if data.len() != expected {
            return Err(Error::Format(format!(
                "layer `{layer_id}` holds {} values but shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                layer: layer_id,
                message: format!("non-finite value {} at flat index {pos}", data[pos]),
            });
        }
        Ok(Self {
            layer_id,
            shape,
            data,
        })
    }

    /// Builds a rank-2 tensor from a dense matrix, rounding to `f32`.
    pub fn from_matrix(layer_id: impl Into<String>, m: &Matrix) -> Result<Self> {
        let (n, p) = m.shape();
        let mut data = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                data.push(m[(i, j)] as f32);
            }
        }
        Self::new(layer_id, vec![n, p], data)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Number of examples (leading dimension).
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    /// Number of features per example after flattening.
    pub fn feature_count(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let p = self.feature_count();
        &self.data[i * p..(i + 1) * p]
    }

    /// Dense `n x p` view in `f64`, flattening any spatial dimensions.
    pub fn to_matrix(&self) -> Matrix {
        let p = self.feature_count();
        Matrix::from_row_iterator(self.n(), p, self.data.iter().map(|&v| f64::from(v)))
    }

    /// Keeps only the listed examples, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let p = self.feature_count();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            if i >= self.n() {
                return Err(Error::Argument(format!(
                    "example index {i} out of range for layer `{}` with n = {}",
                    self.layer_id,
                    self.n()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(self.layer_id.clone(), shape, data)
    }

    pub fn with_layer_id(mut self, layer_id: impl Into<String>) -> Self {
        self.layer_id = layer_id.into();
        self
    }
}

/// Collapses `(n, h, w, c)` into `(n, h*w*c)`; rank-2 tensors pass through.
///
/// The payload is already row-major, so this only rewrites the shape.
pub fn flatten_feature_map(t: &ActivationTensor) -> ActivationTensor {
    let mut out = t.clone();
    if t.rank() == 4 {
        out.shape = vec![t.n(), t.feature_count()];
    }
    out
}

/// Per-layer activations of one model checkpoint over a fixed example set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationArchive {
    layers: Vec<ActivationTensor>,
    example_ids: Vec<String>,
    metadata: BTreeMap<String, String>,
}

impl ActivationArchive {
    /// Validates and assembles an archive. Missing example ids default to
    /// decimal indices.
    pub fn new(
        layers: Vec<ActivationTensor>,
        example_ids: Option<Vec<String>>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Format("archive has no layers".into()))?;
        let n = first.n();
        let mut seen = HashSet::new();
        for layer in &layers {
            if layer.n() != n {
                return Err(Error::Consistency(format!(
                    "layer `{}` has {} examples but layer `{}` has {n}",
                    layer.layer_id,
                    layer.n(),
                    first.layer_id
                )));
            }
            if !seen.insert(layer.layer_id.as_str()) {
                return Err(Error::Consistency(format!(
                    "duplicate layer id `{}`",
                    layer.layer_id
                )));
            }
        }
        let example_ids = example_ids.unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
        if example_ids.len() != n {
            return Err(Error::Consistency(format!(
                "{} example ids for {n} examples",
                example_ids.len()
            )));
        }
        Ok(Self {
            layers,
            example_ids,
            metadata,
        })
    }

    pub fn layers(&self) -> &[ActivationTensor] {
        &self.layers
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn n(&self) -> usize {
        self.example_ids.len()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer_id.clone()).collect()
    }

    pub fn layer_index(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.layer_id == layer_id)
    }

    pub fn layer(&self, layer_id: &str) -> Option<&ActivationTensor> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Dense matrices for every layer, flattened to `n x p`.
    pub fn layer_matrices(&self) -> Vec<Matrix> {
        self.layers.iter().map(ActivationTensor::to_matrix).collect()
    }

    /// Archive restricted to the listed examples (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.select_rows(indices))
            .collect::<Result<Vec<_>>>()?;
        let ids = indices.iter().map(|&i| self.example_ids[i].clone()).collect();
        Self::new(layers, Some(ids), self.metadata.clone())
    }

    /// Reorders this archive's examples to follow `order` (by example id).
    pub fn align_to(&self, order: &[String]) -> Result<Self> {
        let mut index = std::collections::HashMap::with_capacity(self.n());
        for (i, id) in self.example_ids.iter().enumerate() {
            if index.insert(id.as_str(), i).is_some() {
                return Err(Error::Consistency(format!(
                    "example id `{id}` appears more than once"
                )));
            }
        }
        let indices = order
            .iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Consistency(format!("example id `{id}` missing from archive"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.subset(&indices)
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    /// Serializes to the `ACTV` v1 byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.layers.iter().map(|l| l.data.len() * 4).sum();
        let mut out = Vec::with_capacity(payload + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let meta = serde_json::to_string(&self.metadata)
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        put_u32(&mut out, meta.len(), "metadata length")?;
        out.extend_from_slice(meta.as_bytes());

        put_u32(&mut out, self.n(), "example count")?;
        for id in &self.example_ids {
            put_str16(&mut out, id, "example id")?;
        }

        put_u32(&mut out, self.layers.len(), "layer count")?;
        for layer in &self.layers {
            put_str16(&mut out, &layer.layer_id, "layer id")?;
            out.push(layer.rank() as u8);
            for &d in &layer.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &layer.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses an `ACTV` byte buffer. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected \"ACTV\"".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }

        let meta_len = r.u32()? as usize;
        let meta_raw = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let metadata = parse_metadata(meta_raw)?;

        let n = r.u32()? as usize;
        // each id needs at least its two length bytes
        if n > r.remaining() / 2 {
            return Err(Error::Format(format!("example count {n} exceeds file size")));
        }
        let mut example_ids = Vec::with_capacity(n);
        for _ in 0..n {
            example_ids.push(r.str16("example id")?);
        }

        let layer_count = r.u32()? as usize;
        if layer_count == 0 {
            return Err(Error::Format("archive has no layers".into()));
        }
        let mut layers = Vec::new();
        for _ in 0..layer_count {
            let layer_id = r.str16("layer id")?;
            let rank = r.u8()? as usize;
            if rank != 2 && rank != 4 {
                return Err(Error::Format(format!(
                    "layer `{layer_id}` has rank {rank}, expected 2 or 4"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Format(format!("layer `{layer_id}` dimension too large")))?;
                shape.push(d);
            }
            if shape[0] != n {
                return Err(Error::Consistency(format!(
                    "layer `{layer_id}` has {} examples, archive has {n}",
                    shape[0]
                )));
            }
            let count = checked_product(&shape)
                .filter(|c| c.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::Format(format!(
                        "layer `{layer_id}` payload {shape:?} exceeds file size"
                    ))
                })?;
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            layers.push(ActivationTensor::new(layer_id, shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after last layer",
                r.remaining()
            )));
        }
        Self::new(layers, Some(example_ids), metadata)
    }
}

pub fn save_archive(archive: &ActivationArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = archive.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<ActivationArchive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationArchive::from_bytes(&bytes)
}

fn parse_metadata(raw: &str) -> Result<BTreeMap<String, String>> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| Error::Format(format!("metadata JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Format("metadata must be a JSON object".into()))?;
    Ok(obj
        .iter()
        .map(|(k, v)| {
            let v = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (k.clone(), v)
        })
        .collect())
}

fn checked_product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str16(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Format(format!("{what} longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if len > self.remaining() {
            return Err(Error::Format(format!(
                "unexpected end of file at byte {} (wanted {len} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }

    fn str16(&mut self, what: &str) -> Result<String> {
        let b = self.take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}
