//! Per-layer representations for sub-supernets.
//!
//! A layer of a sub-supernet outputs the plain sum of its active operations'
//! outputs. Providers hand out that composed batch for any `(sub, layer)`
//! query: [`SyntheticSource`] draws Gaussian batches of planned intrinsic
//! dimension, [`FileSource`] reads per-`(layer, op)` blobs listed in a manifest.
//!
//! # LIDT container
//!
//! Little-endian binary:
//!
//! ```text
//! magic   "LIDT"          4 bytes
//! version u16 = 1
//! dtype   u8  (0 = f32)
//! ndim    u8
//! dims    ndim x u64
//! payload row-major f32
//! ```
//!
//! The first dimension is the sample count; trailing dimensions are flattened
//! into the feature width.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lid::{synth_manifold, LidError, TensorBatch};
use crate::seed;
use crate::space::{SpaceSpec, SubSupernet};

pub const LIDT_MAGIC: &[u8; 4] = b"LIDT";
pub const LIDT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorFormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported LIDT version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("invalid shape {0:?}")]
    BadShape(Vec<u64>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no operation selected")]
    EmptyMask,
    #[error("mask has {mask} entries but {outputs} outputs were given")]
    MaskLength { mask: usize, outputs: usize },
    #[error("no blob for layer {layer}, op {op}")]
    MissingEntry { layer: usize, op: usize },
    #[error("duplicate manifest entry for layer {layer}, op {op}")]
    DuplicateEntry { layer: usize, op: usize },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("batch size {0} too small (need at least 22)")]
    BatchTooSmall(usize),
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: TensorFormatError },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error(transparent)]
    Lid(#[from] LidError),
}

/// Answers `(sub, layer)` queries with the composed layer output.
///
/// Implementations return identical batches for identical queries and keep the
/// batch size constant across layers.
pub trait ReprSource: Send + Sync {
    fn batch_size(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn layer_output(&self, sub: &SubSupernet, layer: usize) -> Result<TensorBatch, ReprError>;
}

/// Elementwise sum of the outputs whose `selected` flag is set.
pub fn compose_layer_output<B: Borrow<TensorBatch>>(
    op_outputs: &[B],
    selected: &[bool],
) -> Result<TensorBatch, ReprError> {
    if selected.len() != op_outputs.len() {
        return Err(ReprError::MaskLength { mask: selected.len(), outputs: op_outputs.len() });
    }
    let first = op_outputs.first().map(|b| b.borrow());
    if let Some(first) = first {
        for (j, b) in op_outputs.iter().enumerate() {
            let b = b.borrow();
            if (b.rows(), b.cols()) != (first.rows(), first.cols()) {
                return Err(ReprError::ShapeMismatch(format!(
                    "output {j} is {}x{}, output 0 is {}x{}",
                    b.rows(),
                    b.cols(),
                    first.rows(),
                    first.cols()
                )));
            }
        }
    }
    let mut chosen = op_outputs.iter().zip(selected).filter(|(_, &s)| s).map(|(b, _)| b.borrow());
    let mut acc = chosen.next().ok_or(ReprError::EmptyMask)?.clone();
    for b in chosen {
        acc.add_assign_unchecked(b);
    }
    Ok(acc)
}

pub fn encode_tensor(batch: &TensorBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + batch.as_slice().len() * 4);
    out.extend_from_slice(LIDT_MAGIC);
    out.extend_from_slice(&LIDT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(2);
    out.extend_from_slice(&(batch.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(batch.cols() as u64).to_le_bytes());
    for v in batch.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorBatch, TensorFormatError> {
    if bytes.len() < 4 {
        return Err(TensorFormatError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != LIDT_MAGIC {
        return Err(TensorFormatError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(TensorFormatError::TruncatedHeader);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != LIDT_VERSION {
        return Err(TensorFormatError::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(TensorFormatError::UnsupportedDtype(bytes[6]));
    }
    let ndim = bytes[7] as usize;
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(TensorFormatError::TruncatedHeader);
    }
    let dims: Vec<u64> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if ndim == 0 || dims.contains(&0) {
        return Err(TensorFormatError::BadShape(dims));
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|c| usize::try_from(c).ok())
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| TensorFormatError::BadShape(dims.clone()))?;
    let payload = &bytes[header..];
    let expected = count * 4;
    if payload.len() < expected {
        return Err(TensorFormatError::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(TensorFormatError::TrailingBytes(payload.len() - expected));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorFormatError::NonFiniteValue(i));
    }
    let rows = dims[0] as usize;
    TensorBatch::new(rows, count / rows, data).map_err(|_| TensorFormatError::BadShape(dims))
}

pub fn store_tensor(path: impl AsRef<Path>, batch: &TensorBatch) -> Result<(), TensorFormatError> {
    fs::write(path, encode_tensor(batch))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorBatch, TensorFormatError> {
    decode_tensor(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub op: usize,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
}

/// Activation manifest written by the exporter. Fields beyond these are kept
/// opaque (`extra`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub batch: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

type BlobKey = (usize, usize);

/// Provider backed by per-`(layer, op)` LIDT blobs.
pub struct FileSource {
    batch: usize,
    num_layers: usize,
    paths: HashMap<BlobKey, PathBuf>,
    cache: RwLock<HashMap<BlobKey, Arc<TensorBatch>>>,
    manifest: Manifest,
}

pub fn file_source(manifest_path: impl AsRef<Path>) -> Result<FileSource, ReprError> {
    let manifest_path = manifest_path.as_ref();
    let bad = |msg: String| ReprError::Manifest { path: manifest_path.to_path_buf(), msg };
    let text = fs::read_to_string(manifest_path).map_err(|e| bad(e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    FileSource::new(manifest, &base)
}

impl FileSource {
    pub fn new(manifest: Manifest, base_dir: &Path) -> Result<Self, ReprError> {
        if manifest.batch == 0 {
            return Err(ReprError::Manifest {
                path: base_dir.to_path_buf(),
                msg: "batch must be positive".into(),
            });
        }
        let mut paths = HashMap::new();
        for e in &manifest.entries {
            let p = base_dir.join(&e.path);
            if paths.insert((e.layer, e.op), p).is_some() {
                return Err(ReprError::DuplicateEntry { layer: e.layer, op: e.op });
            }
        }
        let num_layers = manifest.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0);
        Ok(Self { batch: manifest.batch, num_layers, paths, cache: RwLock::default(), manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn blob(&self, layer: usize, op: usize) -> Result<Arc<TensorBatch>, ReprError> {
        if let Some(b) = self.cache.read().unwrap().get(&(layer, op)) {
            return Ok(b.clone());
        }
        let path = self.paths.get(&(layer, op)).ok_or(ReprError::MissingEntry { layer, op })?;
        let batch = load_tensor(path)
            .map_err(|source| ReprError::Tensor { path: path.clone(), source })?;
        if batch.rows() != self.batch {
            return Err(ReprError::ShapeMismatch(format!(
                "{} has {} rows, manifest batch is {}",
                path.display(),
                batch.rows(),
                self.batch
            )));
        }
        let batch = Arc::new(batch);
        self.cache.write().unwrap().insert((layer, op), batch.clone());
        Ok(batch)
    }
}

impl ReprSource for FileSource {
    fn batch_size(&self) -> usize {
        self.batch
    }

    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn layer_output(&self, sub: &SubSupernet, layer: usize) -> Result<TensorBatch, ReprError> {
        if layer >= sub.num_layers() {
            return Err(ReprError::LayerOutOfRange { layer, layers: sub.num_layers() });
        }
        let blobs = sub
            .mask(layer)
            .ops()
            .map(|op| self.blob(layer, op))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&TensorBatch> = blobs.iter().map(|b| b.as_ref()).collect();
        compose_layer_output(&refs, &vec![true; refs.len()])
    }
}

/// Planned intrinsic dimension per operation name, with optional per-layer
/// overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfilePlan {
    #[serde(default)]
    pub dims: BTreeMap<String, usize>,
    #[serde(default)]
    pub layers: BTreeMap<usize, BTreeMap<String, usize>>,
}

impl ProfilePlan {
    pub fn uniform<'a>(dims: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        Self {
            dims: dims.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            layers: BTreeMap::new(),
        }
    }

    pub fn with_layer<'a>(
        mut self,
        layer: usize,
        dims: impl IntoIterator<Item = (&'a str, usize)>,
    ) -> Self {
        self.layers.insert(layer, dims.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
        self
    }

    pub fn dim(&self, layer: usize, op: &str) -> Option<usize> {
        self.layers
            .get(&layer)
            .and_then(|m| m.get(op))
            .or_else(|| self.dims.get(op))
            .copied()
    }
}

/// Desk-scale stand-in for trained activations: each `(layer, op)` emits a
/// Gaussian batch of its planned dimension embedded in `m` features.
pub struct SyntheticSource {
    spec: SpaceSpec,
    seed: u64,
    batch: usize,
    width: usize,
    dims: Vec<Vec<usize>>,
    cache: RwLock<HashMap<BlobKey, Arc<TensorBatch>>>,
}

pub fn synthetic_source(
    spec: &SpaceSpec,
    seed: u64,
    b: usize,
    m: usize,
    plan: &ProfilePlan,
) -> Result<SyntheticSource, ReprError> {
    if b < 22 {
        return Err(ReprError::BatchTooSmall(b));
    }
    let mut dims = Vec::with_capacity(spec.num_layers());
    for (l, layer) in spec.layers().iter().enumerate() {
        let mut row = Vec::with_capacity(layer.ops.len());
        for op in &layer.ops {
            let d = plan.dim(l, op).ok_or_else(|| {
                ReprError::InvalidPlan(format!("no dimension for op {op:?} at layer {l}"))
            })?;
            if d == 0 || d > m {
                return Err(ReprError::InvalidPlan(format!(
                    "dimension {d} for op {op:?} at layer {l} must be in 1..={m}"
                )));
            }
            if b < d + 2 {
                return Err(ReprError::InvalidPlan(format!(
                    "dimension {d} needs batch of at least {}",
                    d + 2
                )));
            }
            row.push(d);
        }
        dims.push(row);
    }
    Ok(SyntheticSource { spec: spec.clone(), seed, batch: b, width: m, dims, cache: RwLock::default() })
}

impl SyntheticSource {
    pub fn planned_dim(&self, layer: usize, op: usize) -> usize {
        self.dims[layer][op]
    }

    /// The raw output of one operation at one layer.
    pub fn op_output(&self, layer: usize, op: usize) -> Result<Arc<TensorBatch>, ReprError> {
        if let Some(b) = self.cache.read().unwrap().get(&(layer, op)) {
            return Ok(b.clone());
        }
        let s = seed::derive(self.seed, &[layer as u64, op as u64]);
        let batch = Arc::new(synth_manifold(self.dims[layer][op], self.width, self.batch, s)?);
        self.cache.write().unwrap().insert((layer, op), batch.clone());
        Ok(batch)
    }
}

impl ReprSource for SyntheticSource {
    fn batch_size(&self) -> usize {
        self.batch
    }

    fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    fn layer_output(&self, sub: &SubSupernet, layer: usize) -> Result<TensorBatch, ReprError> {
        if layer >= self.spec.num_layers() {
            return Err(ReprError::LayerOutOfRange { layer, layers: self.spec.num_layers() });
        }
        let mask = sub.mask(layer);
        if mask.len() != self.spec.op_count(layer) {
            return Err(ReprError::ShapeMismatch(format!(
                "mask width {} at layer {layer}, space has {} ops",
                mask.len(),
                self.spec.op_count(layer)
            )));
        }
        let blobs = mask.ops().map(|op| self.op_output(layer, op)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&TensorBatch> = blobs.iter().map(|b| b.as_ref()).collect();
        compose_layer_output(&refs, &vec![true; refs.len()])
    }
}
