//! Local intrinsic dimension estimation.
//!
//! The estimator is the maximum-likelihood form over the `k` nearest Euclidean
//! neighbours of a reference sample:
//!
//! ```text
//! LID(x) = -( (1/k) * Σ_{i=1..k} ln(r_i / r_k) )^-1
//! ```
//!
//! where `r_1 <= ... <= r_k` are the neighbour distances. The layer LID of a
//! batch is the mean of the per-sample estimates, each row taken in turn as the
//! reference against the rest of the batch.
//!
//! Rows at zero distance from the reference (duplicates) are dropped from its
//! neighbour set. A row left with fewer than `k` neighbours is skipped in the
//! batch mean and counted in [`LayerLid::skipped`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

/// Neighbour count used when none is configured.
pub const DEFAULT_K: usize = 20;

/// Batch size used for LID estimation when none is configured.
pub const DEFAULT_BATCH: usize = 128;

/// Value returned for a degenerate neighbourhood under [`DegeneratePolicy::Clamp`].
pub const LID_MAX: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LidError {
    #[error("batch must have at least one row and one column (got {rows}x{cols})")]
    EmptyBatch { rows: usize, cols: usize },
    #[error("batch data length {got} does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("k = {k} exceeds the {available} available neighbours")]
    KTooLarge { k: usize, available: usize },
    #[error("reference index {index} out of range for {rows} rows")]
    InvalidIndex { index: usize, rows: usize },
    #[error("row {row}: only {valid} non-duplicate neighbours, need k = {k}")]
    InsufficientNeighbors { row: usize, valid: usize, k: usize },
    #[error("neighbour distances are not a sorted, finite, non-empty list")]
    InvalidDistances,
    #[error("zero neighbour distance (duplicate points)")]
    ZeroDistance,
    #[error("all neighbour distances are equal; estimator undefined")]
    DegenerateNeighborhood,
    #[error("every one of the {rows} rows was skipped for lack of distinct neighbours")]
    AllRowsSkipped { rows: usize },
    #[error("intrinsic dimension {d} must be in 1..={ambient}")]
    InvalidDims { d: usize, ambient: usize },
    #[error("need at least {min} samples for dimension {d}, got {n}")]
    TooFewSamples { n: usize, d: usize, min: usize },
}

/// A `b x m` matrix of layer representations, row-major, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBatch {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TensorBatch {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LidError> {
        if rows == 0 || cols == 0 {
            return Err(LidError::EmptyBatch { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LidError::ShapeMismatch { rows, cols, got: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LidError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, LidError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LidError::ShapeMismatch { rows: rows.len(), cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Sample count `b`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Feature width `m`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Elementwise `self += other`. Shapes must already agree.
    pub(crate) fn add_assign_unchecked(&mut self, other: &TensorBatch) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Euclidean distance between two rows, accumulated in `f64`.
    pub fn row_distance(&self, i: usize, j: usize) -> f64 {
        euclidean(self.row(i), self.row(j))
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Ascending neighbour distances `r_1 <= ... <= r_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborDistances(Vec<f64>);

impl NeighborDistances {
    /// Accepts any non-empty, finite, non-negative, non-decreasing list.
    /// Zero entries are allowed here so that [`mle_lid`] can report them.
    pub fn new(distances: Vec<f64>) -> Result<Self, LidError> {
        let sorted = distances.windows(2).all(|w| w[0] <= w[1]);
        let valid = distances.iter().all(|d| d.is_finite() && *d >= 0.0);
        if distances.is_empty() || !sorted || !valid {
            return Err(LidError::InvalidDistances);
        }
        Ok(Self(distances))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `r_k`, the largest of the distances.
    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// A positive, finite intrinsic-dimension estimate.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LidEstimate(f64);

impl LidEstimate {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DegeneratePolicy {
    /// All-equal neighbour distances are an error.
    #[default]
    Error,
    /// All-equal neighbour distances yield the given value (normally [`LID_MAX`]).
    Clamp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidConfig {
    pub k: usize,
    pub degenerate: DegeneratePolicy,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, degenerate: DegeneratePolicy::Error }
    }
}

impl LidConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }
}

/// The `k` smallest distances from `ref_index` to the other rows of `batch`.
///
/// Rows at distance zero are excluded. Ties at the cut are resolved by row
/// index, so the result is deterministic.
pub fn knn_distances(
    batch: &TensorBatch,
    ref_index: usize,
    k: usize,
) -> Result<NeighborDistances, LidError> {
    let b = batch.rows();
    if ref_index >= b {
        return Err(LidError::InvalidIndex { index: ref_index, rows: b });
    }
    if k == 0 {
        return Err(LidError::KZero);
    }
    if k > b - 1 {
        return Err(LidError::KTooLarge { k, available: b - 1 });
    }
    let reference = batch.row(ref_index);
    let mut cand: Vec<(f64, usize)> = (0..b)
        .filter(|&j| j != ref_index)
        .map(|j| (euclidean(reference, batch.row(j)), j))
        .filter(|&(d, _)| d > 0.0)
        .collect();
    if cand.len() < k {
        return Err(LidError::InsufficientNeighbors { row: ref_index, valid: cand.len(), k });
    }
    let by_dist_then_index =
        |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_dist_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_dist_then_index);
    Ok(NeighborDistances(cand.into_iter().map(|(d, _)| d).collect()))
}

/// Maximum-likelihood LID from sorted neighbour distances.
pub fn mle_lid(nd: &NeighborDistances) -> Result<LidEstimate, LidError> {
    mle_lid_with(nd, DegeneratePolicy::Error)
}

pub fn mle_lid_with(
    nd: &NeighborDistances,
    policy: DegeneratePolicy,
) -> Result<LidEstimate, LidError> {
    let r = nd.as_slice();
    if r[0] <= 0.0 {
        return Err(LidError::ZeroDistance);
    }
    let rk = nd.max();
    // The i = k term is ln(1) = 0.
    let log_sum: f64 = r.iter().map(|&ri| (ri / rk).ln()).sum();
    if log_sum == 0.0 {
        return match policy {
            DegeneratePolicy::Error => Err(LidError::DegenerateNeighborhood),
            DegeneratePolicy::Clamp(v) => Ok(LidEstimate(v)),
        };
    }
    Ok(LidEstimate(-(r.len() as f64) / log_sum))
}

/// Outcome of a batch-level LID estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLid {
    pub estimate: LidEstimate,
    /// Rows dropped from the mean for lack of `k` distinct neighbours.
    pub skipped: usize,
    pub rows: usize,
}

/// Mean per-sample LID of a batch with the default degenerate policy.
pub fn layer_lid(batch: &TensorBatch, k: usize) -> Result<LidEstimate, LidError> {
    layer_lid_with(batch, &LidConfig::with_k(k)).map(|r| r.estimate)
}

pub fn layer_lid_with(batch: &TensorBatch, cfg: &LidConfig) -> Result<LayerLid, LidError> {
    let b = batch.rows();
    if cfg.k == 0 {
        return Err(LidError::KZero);
    }
    if cfg.k > b - 1 {
        return Err(LidError::KTooLarge { k: cfg.k, available: b - 1 });
    }
    let per_row: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|row| match knn_distances(batch, row, cfg.k) {
            Ok(nd) => mle_lid_with(&nd, cfg.degenerate).map(|e| Some(e.0)),
            Err(LidError::InsufficientNeighbors { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    let values: Vec<f64> = per_row.iter().flatten().copied().collect();
    if values.is_empty() {
        return Err(LidError::AllRowsSkipped { rows: b });
    }
    let mean = pairwise_sum(&values) / values.len() as f64;
    Ok(LayerLid { estimate: LidEstimate(mean), skipped: b - values.len(), rows: b })
}

/// Pairwise (cascade) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `n` draws from a `d`-dimensional standard Gaussian, embedded in `ambient`
/// dimensions through a seed-determined orthonormal map.
pub fn synth_manifold(d: usize, ambient: usize, n: usize, seed: u64) -> Result<TensorBatch, LidError> {
    if d == 0 || d > ambient {
        return Err(LidError::InvalidDims { d, ambient });
    }
    if n < d + 2 {
        return Err(LidError::TooFewSamples { n, d, min: d + 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal_columns(ambient, d, &mut rng);
    let mut data = Vec::with_capacity(n * ambient);
    let mut z = vec![0.0f64; d];
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for r in 0..ambient {
            let row = &basis[r * d..(r + 1) * d];
            let v: f64 = row.iter().zip(&z).map(|(q, zi)| q * zi).sum();
            data.push(v as f32);
        }
    }
    TensorBatch::new(n, ambient, data)
}

/// `rows x cols` matrix (row-major) with orthonormal columns, from Gram-Schmidt
/// (applied twice) on a Gaussian draw.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= dot * ui);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A near-dependent draw is resampled.
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (c, col) in q.iter().enumerate() {
        for (r, &val) in col.iter().enumerate() {
            out[r * cols + c] = val;
        }
    }
    out
}
