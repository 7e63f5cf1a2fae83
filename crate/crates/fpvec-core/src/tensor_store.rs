//! Named-tensor checkpoints: load, save, validate, compare, digest.
//!
//! Checkpoints are immutable after load and iterate in lexicographic name
//! order, so serialization, digests, and diffs are reproducible. Files use
//! the safetensors layout: an 8-byte little-endian header length, a JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}`, then the
//! raw little-endian tensor bytes. Free-form metadata lives under the
//! header's `__metadata__` key.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Upper bound on the JSON header length; anything larger is a corrupt file.
const MAX_HEADER_LEN: u64 = 256 * 1024 * 1024;

// ---------------------------------------------------------------------------
// Dtype
// ---------------------------------------------------------------------------

/// Element type of a checkpoint. One dtype per checkpoint; mixed-dtype
/// containers are rejected so delta arithmetic stays homogeneous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// safetensors dtype tag.
    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "float32",
            Dtype::F64 => "float64",
        })
    }
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Contiguous row-major element buffer, typed by the checkpoint dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense tensor: positive dimensions and a matching element buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn checked_elem_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Argument("tensor shape must have at least one dimension".into()));
    }
    let mut count: usize = 1;
    for &dim in shape {
        if dim == 0 {
            return Err(Error::Argument("zero-size tensors are rejected".into()));
        }
        count = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Argument("tensor shape overflows element count".into()))?;
    }
    Ok(count)
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let count = checked_elem_count(&shape)?;
        if count != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} implies {count} elements, buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: TensorData::F32(data) })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count = checked_elem_count(&shape)?;
        if count != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} implies {count} elements, buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: TensorData::F64(data) })
    }

    /// Build a tensor of the given dtype from f64 values, rounding once.
    pub fn from_f64_values(dtype: Dtype, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        match dtype {
            Dtype::F32 => Tensor::from_f32(shape, values.into_iter().map(|v| v as f32).collect()),
            Dtype::F64 => Tensor::from_f64(shape, values),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element at flat index `i`, widened to f64 (exact for both dtypes).
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    pub fn iter_f64(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match &self.data {
            TensorData::F32(v) => Box::new(v.iter().map(|&x| x as f64)),
            TensorData::F64(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.iter_f64().collect()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Flat index of the first NaN or infinity, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    fn byte_len(&self) -> usize {
        self.len() * self.dtype().elem_size()
    }

    fn write_le_bytes(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    fn from_le_bytes(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        match dtype {
            Dtype::F32 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect();
                Tensor::from_f32(shape, data)
            }
            Dtype::F64 => {
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                Tensor::from_f64(shape, data)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

/// An ordered map from tensor names to tensors, with free-form provenance
/// metadata. Metadata never participates in arithmetic or digests.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    dtype: Dtype,
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(dtype: Dtype) -> Self {
        Checkpoint { dtype, tensors: BTreeMap::new(), meta: BTreeMap::new() }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// Insert a tensor. Names must be unique and non-empty; the tensor dtype
    /// must match the checkpoint dtype.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Argument("tensor name must be non-empty".into()));
        }
        if tensor.dtype() != self.dtype {
            return Err(Error::Argument(format!(
                "tensor '{name}' is {} but checkpoint is {}",
                tensor.dtype(),
                self.dtype
            )));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate tensor name '{name}'")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    /// Replace the whole metadata map.
    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    /// Total element count across all tensors.
    pub fn elem_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Name of the first tensor holding a non-finite element, if any.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| t.first_nonfinite().is_some())
            .map(|(n, _)| n.as_str())
    }

    /// Load with default options (non-finite elements rejected).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        let ckpt = parse_safetensors(&bytes)?;
        if !options.allow_nonfinite {
            if let Some(name) = ckpt.first_nonfinite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(ckpt)
    }

    /// Save to a safetensors file. The write is atomic (temp file + rename)
    /// and `load(save(ckpt))` reproduces the checkpoint bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = encode_safetensors(self)?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::Builder::new()
            .prefix(".fpvec-tmp-")
            .tempfile_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    /// Content hash over `(name, shape, dtype, bytes)` in lexicographic name
    /// order. Stable across platforms; independent of metadata.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((tensor.shape.len() as u64).to_le_bytes());
            for &dim in &tensor.shape {
                hasher.update((dim as u64).to_le_bytes());
            }
            hasher.update([match tensor.dtype() {
                Dtype::F32 => 0u8,
                Dtype::F64 => 1u8,
            }]);
            let mut buf = Vec::with_capacity(tensor.byte_len());
            tensor.write_le_bytes(&mut buf);
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept NaN/Inf elements instead of failing with `NonFinite`.
    pub allow_nonfinite: bool,
}

// ---------------------------------------------------------------------------
// Structural compatibility
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchReason {
    MissingInLeft,
    MissingInRight,
    ShapeMismatch,
    DtypeMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub name: String,
    pub reason: MismatchReason,
}

/// Outcome of [`check_compat`]: compatible iff `mismatches` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible {
            return f.write_str("compatible");
        }
        write!(f, "{} mismatch(es):", self.mismatches.len())?;
        for m in self.mismatches.iter().take(5) {
            write!(f, " [{} {:?}]", m.name, m.reason)?;
        }
        if self.mismatches.len() > 5 {
            write!(f, " ...")?;
        }
        Ok(())
    }
}

/// Structural-compatibility predicate: identical name sets and, per name,
/// identical shapes and dtypes. Metadata is ignored. The report carries all
/// findings; nothing here is an error.
pub fn check_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let mut mismatches = Vec::new();
    for (name, ta) in a.tensors() {
        match b.get(name) {
            None => mismatches.push(Mismatch {
                name: name.to_string(),
                reason: MismatchReason::MissingInRight,
            }),
            Some(tb) => {
                if ta.shape() != tb.shape() {
                    mismatches.push(Mismatch {
                        name: name.to_string(),
                        reason: MismatchReason::ShapeMismatch,
                    });
                }
                if ta.dtype() != tb.dtype() {
                    mismatches.push(Mismatch {
                        name: name.to_string(),
                        reason: MismatchReason::DtypeMismatch,
                    });
                }
            }
        }
    }
    for (name, _) in b.tensors() {
        if !a.contains(name) {
            mismatches.push(Mismatch {
                name: name.to_string(),
                reason: MismatchReason::MissingInLeft,
            });
        }
    }
    CompatReport { compatible: mismatches.is_empty(), mismatches }
}

// ---------------------------------------------------------------------------
// safetensors encoding
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn encode_safetensors(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !ckpt.meta.is_empty() {
        let meta: serde_json::Map<String, serde_json::Value> = ckpt
            .meta
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        header.insert("__metadata__".into(), serde_json::Value::Object(meta));
    }

    let mut offset = 0usize;
    let mut data = Vec::new();
    for (name, tensor) in ckpt.tensors() {
        let begin = offset;
        tensor.write_le_bytes(&mut data);
        offset = data.len();
        let entry = HeaderEntry {
            dtype: tensor.dtype().tag().to_string(),
            shape: tensor.shape().to_vec(),
            data_offsets: [begin, offset],
        };
        header.insert(name.to_string(), serde_json::to_value(entry)?);
    }

    let header_json = serde_json::to_vec(&serde_json::Value::Object(header))?;
    let mut out = Vec::with_capacity(8 + header_json.len() + data.len());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn parse_safetensors(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Parse("file shorter than the 8-byte header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Parse(format!("header length {header_len} exceeds limit")));
    }
    let header_len = header_len as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::Parse("file truncated inside the JSON header".into()));
    }
    let header_bytes = &bytes[8..8 + header_len];
    let data = &bytes[8 + header_len..];

    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Parse(format!("malformed JSON header: {e}")))?;

    let mut meta = BTreeMap::new();
    let mut dtype: Option<Dtype> = None;
    let mut tensors = BTreeMap::new();

    for (name, value) in header {
        if name == "__metadata__" {
            let map: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::Parse(format!("malformed __metadata__: {e}")))?;
            meta = map;
            continue;
        }
        if name.is_empty() {
            return Err(Error::Parse("empty tensor name".into()));
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("malformed entry for '{name}': {e}")))?;
        let tensor_dtype = Dtype::from_tag(&entry.dtype)?;
        match dtype {
            None => dtype = Some(tensor_dtype),
            Some(d) if d != tensor_dtype => {
                return Err(Error::Parse(format!(
                    "mixed dtypes: '{name}' is {} but checkpoint started as {}",
                    tensor_dtype, d
                )));
            }
            Some(_) => {}
        }
        let count = checked_elem_count(&entry.shape)
            .map_err(|e| Error::Parse(format!("tensor '{name}': {e}")))?;
        let expected_bytes = count * tensor_dtype.elem_size();
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() {
            return Err(Error::Parse(format!(
                "tensor '{name}': offsets [{begin}, {end}] out of range for {} data bytes",
                data.len()
            )));
        }
        if end - begin != expected_bytes {
            return Err(Error::Parse(format!(
                "tensor '{name}': shape {:?} needs {expected_bytes} bytes, offsets give {}",
                entry.shape,
                end - begin
            )));
        }
        let tensor = Tensor::from_le_bytes(tensor_dtype, entry.shape, &data[begin..end])
            .map_err(|e| Error::Parse(format!("tensor '{name}': {e}")))?;
        tensors.insert(name, tensor);
    }

    let dtype = dtype.unwrap_or(Dtype::F32);
    let mut ckpt = Checkpoint::new(dtype);
    ckpt.meta = meta;
    for (name, tensor) in tensors {
        ckpt.insert(name, tensor)?;
    }
    Ok(ckpt)
}
