//! LID-driven supernet partitioning.
//!
//! For every unpartitioned layer of a sub-supernet, the layer is split into one
//! child per operation, each child is characterized by its layer-wise LID
//! profile, and the children's pairwise similarities feed a balanced
//! bipartition that maximizes summed intra-group similarity (the partition
//! score). The layer with the highest score is split, its two operation groups
//! are merged back into two sub-supernets, and the procedure repeats for `T`
//! rounds, giving `2^T` leaves.

use std::error::Error as StdError;
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lid::{layer_lid_with, LidConfig, LidError};
use crate::repr::{ReprError, ReprSource};
use crate::space::{OpMask, SpaceError, SpaceSpec, SubSupernet};

/// Added to the Euclidean distance so identical profiles stay finite.
pub const SIMILARITY_EPS: f64 = 1e-6;

/// Enumeration bound for [`best_balanced_bipartition`].
pub const MAX_BIPARTITION_OPS: usize = 20;

pub type HookError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("layer {layer}: {source}")]
    Provider { layer: usize, source: ReprError },
    #[error("layer {layer}: {source}")]
    Estimator { layer: usize, source: LidError },
    #[error("invalid LID profile: {0}")]
    InvalidProfile(String),
    #[error("profile lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("Pearson similarity undefined for a constant profile")]
    ConstantProfile,
    #[error("similarity ({i}, {j}): {source}")]
    Similarity { i: usize, j: usize, source: Box<PartitionError> },
    #[error("invalid similarity matrix: {0}")]
    InvalidMatrix(String),
    #[error("{0} operations exceed the enumeration bound of {MAX_BIPARTITION_OPS}")]
    TooManyOps(usize),
    #[error("need at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("no unpartitioned layer left in {0}")]
    NoSplittableLayer(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("round {round}, node {node}: {source}")]
    Round { round: usize, node: usize, source: Box<PartitionError> },
    #[error("hook failed: {0}")]
    Hook(HookError),
}

/// Per-layer LID estimates of one architecture or sub-supernet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LidProfile(Vec<f64>);

impl LidProfile {
    pub fn new(values: Vec<f64>) -> Result<Self, PartitionError> {
        if values.is_empty() {
            return Err(PartitionError::InvalidProfile("empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(PartitionError::InvalidProfile(format!("entry {v} is not finite and positive")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for LidProfile {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for LidProfile {
    type Error = PartitionError;
    fn try_from(v: Vec<f64>) -> Result<Self, PartitionError> {
        Self::new(v)
    }
}

impl From<LidProfile> for Vec<f64> {
    fn from(p: LidProfile) -> Self {
        p.0
    }
}

/// `[LID(z_1), ..., LID(z_L)]` for a sub-supernet, where `z_l` is the provider's
/// composed output at layer `l`.
pub fn sub_supernet_lid_profile(
    source: &dyn ReprSource,
    sub: &SubSupernet,
    lid: &LidConfig,
) -> Result<LidProfile, PartitionError> {
    let values = (0..sub.num_layers())
        .map(|layer| {
            let batch = source
                .layer_output(sub, layer)
                .map_err(|source| PartitionError::Provider { layer, source })?;
            layer_lid_with(&batch, lid)
                .map(|r| r.estimate.value())
                .map_err(|source| PartitionError::Estimator { layer, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    LidProfile::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// `1 / (||a - b||_2 + eps)`
    #[default]
    Euclidean,
    /// Sample Pearson correlation coefficient.
    Pearson,
}

impl FromStr for Measure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Self::Euclidean),
            "pearson" => Ok(Self::Pearson),
            other => Err(format!("unknown similarity measure {other:?}")),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Pearson => "pearson",
        })
    }
}

pub fn lid_similarity(a: &[f64], b: &[f64], measure: Measure) -> Result<f64, PartitionError> {
    if a.len() != b.len() {
        return Err(PartitionError::LengthMismatch(a.len(), b.len()));
    }
    match measure {
        Measure::Euclidean => {
            let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            Ok(1.0 / (dist + SIMILARITY_EPS))
        }
        Measure::Pearson => pearson(a, b),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, PartitionError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(PartitionError::ConstantProfile);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric `n x n` similarity matrix. The diagonal is unused and stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Row-major entries; must be finite and exactly symmetric.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self, PartitionError> {
        if entries.len() != n * n {
            return Err(PartitionError::InvalidMatrix(format!(
                "{} entries for n = {n}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(PartitionError::InvalidMatrix("non-finite entry".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(PartitionError::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, entries })
    }

    /// Builds from a function evaluated once per unordered pair `i < j`.
    pub fn from_pairs(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Self { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n.max(1)).map(|r| r.to_vec()).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|v| v * c).collect() }
    }
}

impl Serialize for SimilarityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

pub fn similarity_matrix<P: AsRef<[f64]>>(
    profiles: &[P],
    measure: Measure,
) -> Result<SimilarityMatrix, PartitionError> {
    let n = profiles.len();
    if n < 2 {
        return Err(PartitionError::TooFewItems(n));
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = lid_similarity(profiles[i].as_ref(), profiles[j].as_ref(), measure)
                .map_err(|e| PartitionError::Similarity { i, j, source: Box::new(e) })?;
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix { n, entries })
}

/// A balanced split of `0..n` into `group` and its complement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bipartition {
    pub group: Vec<usize>,
    pub score: f64,
}

impl Bipartition {
    pub fn rest(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| !self.group.contains(i)).collect()
    }
}

fn intra_sum(s: &SimilarityMatrix, members: u64) -> f64 {
    let mut sum = 0.0;
    for i in 0..s.n {
        if members >> i & 1 == 0 {
            continue;
        }
        for j in i + 1..s.n {
            if members >> j & 1 == 1 {
                sum += s.get(i, j);
            }
        }
    }
    sum
}

fn mask_of(group: &[usize]) -> u64 {
    group.iter().fold(0u64, |m, &i| m | 1 << i)
}

/// Partition score of `group`: summed similarity over unordered pairs inside
/// `group` plus over unordered pairs inside its complement.
///
/// A group and its complement produce bit-identical scores.
pub fn partition_score(s: &SimilarityMatrix, group: &[usize]) -> f64 {
    let full = if s.n == 64 { u64::MAX } else { (1u64 << s.n) - 1 };
    let g = mask_of(group);
    intra_sum(s, g) + intra_sum(s, full & !g)
}

fn members(mask: u64, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| mask >> i & 1 == 1).collect()
}

/// Exhaustive maximization of the partition score over all groups with
/// `floor(n/2) <= |group| <= ceil(n/2)`. Ties go to the lexicographically
/// smallest group (as a sorted index list).
pub fn best_balanced_bipartition(s: &SimilarityMatrix) -> Result<Bipartition, PartitionError> {
    let n = s.n;
    if n < 2 {
        return Err(PartitionError::TooFewItems(n));
    }
    if n > MAX_BIPARTITION_OPS {
        return Err(PartitionError::TooManyOps(n));
    }
    let (lo, hi) = (n / 2, n.div_ceil(2));
    let full = (1u64 << n) - 1;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1..full {
        let size = mask.count_ones() as usize;
        if size < lo || size > hi {
            continue;
        }
        let score = intra_sum(s, mask) + intra_sum(s, full & !mask);
        let better = match &best {
            None => true,
            Some((b, g)) => score > *b || (score == *b && members(mask, n) < *g),
        };
        if better {
            best = Some((score, members(mask, n)));
        }
    }
    let (score, group) = best.expect("n >= 2 always admits a balanced split");
    Ok(Bipartition { group, score })
}

/// Spread of the off-diagonal similarities:
///
/// ```text
/// s_bar = 1/(2n) * Σ_{i != j} s_ij
/// D     = sqrt( 1/(2n) * Σ_{i != j} (s_ij - s_bar)^2 )
/// ```
///
/// The `1/(2n)` normalization is kept as written; it is a true mean over the
/// `n(n-1)` ordered pairs only when `n = 3`.
pub fn separability_score(s: &SimilarityMatrix) -> Result<f64, PartitionError> {
    let n = s.n;
    if n < 2 {
        return Err(PartitionError::TooFewItems(n));
    }
    let norm = 1.0 / (2.0 * n as f64);
    let off_diag = || (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
    let mean = norm * off_diag().map(|(i, j)| s.get(i, j)).sum::<f64>();
    let var = norm * off_diag().map(|(i, j)| (s.get(i, j) - mean).powi(2)).sum::<f64>();
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplitConfig {
    pub lid: LidConfig,
    pub measure: Measure,
}

/// Everything computed for one candidate layer of a split.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub layer: usize,
    pub profiles: Vec<LidProfile>,
    pub matrix: SimilarityMatrix,
    pub bipartition: Bipartition,
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    /// Sub-supernet restricted to the winning group at `layer`.
    pub group_sub: SubSupernet,
    /// Sub-supernet restricted to the complement at `layer`.
    pub rest_sub: SubSupernet,
    pub layer: usize,
    pub group: Vec<usize>,
    pub score: f64,
    pub candidates: Vec<CandidateEval>,
}

/// Per-operation children of `sub` at `layer`, their profiles, similarity
/// matrix and best bipartition.
pub fn evaluate_layer(
    sub: &SubSupernet,
    layer: usize,
    source: &dyn ReprSource,
    cfg: &SplitConfig,
) -> Result<CandidateEval, PartitionError> {
    let children = sub.split_layer(layer)?;
    if children.len() > MAX_BIPARTITION_OPS {
        return Err(PartitionError::TooManyOps(children.len()));
    }
    let profiles = children
        .par_iter()
        .map(|c| sub_supernet_lid_profile(source, c, &cfg.lid))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = similarity_matrix(&profiles, cfg.measure)?;
    let bipartition = best_balanced_bipartition(&matrix)?;
    Ok(CandidateEval { layer, profiles, matrix, bipartition })
}

/// One round of splitting for a single sub-supernet: every unpartitioned layer
/// is scored and the best-scoring one (lowest index on ties) is split.
pub fn split_supernet(
    sub: &SubSupernet,
    source: &dyn ReprSource,
    cfg: &SplitConfig,
) -> Result<SplitOutcome, PartitionError> {
    let layers = sub.unpartitioned_layers();
    if layers.is_empty() {
        return Err(PartitionError::NoSplittableLayer(sub.id()));
    }
    let candidates = layers
        .par_iter()
        .map(|&l| evaluate_layer(sub, l, source, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let best = candidates
        .iter()
        .reduce(|a, b| if b.bipartition.score > a.bipartition.score { b } else { a })
        .expect("at least one candidate");
    let layer = best.layer;
    let width = sub.mask(layer).len();
    let group = best.bipartition.group.clone();
    let rest = best.bipartition.rest(width);
    Ok(SplitOutcome {
        group_sub: sub.with_layer_mask(layer, OpMask::from_ops(width, &group)?)?,
        rest_sub: sub.with_layer_mask(layer, OpMask::from_ops(width, &rest)?)?,
        layer,
        score: best.bipartition.score,
        group,
        candidates,
    })
}

/// Supplies the representation source used to split a given sub-supernet.
///
/// In a training deployment this is where the warmed-up weights of `sub` are
/// exposed; at desk scale a single shared source is typical ([`SharedSource`]).
pub trait SourceFactory {
    fn source_for(&self, sub: &SubSupernet, round: usize) -> Result<Arc<dyn ReprSource>, PartitionError>;
}

/// Uses one source for every node.
pub struct SharedSource(pub Arc<dyn ReprSource>);

impl SourceFactory for SharedSource {
    fn source_for(&self, _: &SubSupernet, _: usize) -> Result<Arc<dyn ReprSource>, PartitionError> {
        Ok(self.0.clone())
    }
}

impl<F> SourceFactory for F
where
    F: Fn(&SubSupernet, usize) -> Result<Arc<dyn ReprSource>, PartitionError>,
{
    fn source_for(&self, sub: &SubSupernet, round: usize) -> Result<Arc<dyn ReprSource>, PartitionError> {
        self(sub, round)
    }
}

/// Training-side callbacks around the partition rounds. Both default to no-ops.
pub trait PartitionHooks {
    /// Called on each sub-supernet before it is split in `round` (1-based).
    fn warmup(&mut self, _sub: &SubSupernet, _round: usize) -> Result<(), HookError> {
        Ok(())
    }

    /// Called on each leaf after the final round.
    fn finetune(&mut self, _leaf: &SubSupernet) -> Result<(), HookError> {
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoopHooks;

impl PartitionHooks for NoopHooks {}

#[derive(Debug, Clone)]
pub struct NodeSplit {
    pub layer: usize,
    pub group: Vec<usize>,
    pub score: f64,
    pub candidates: Vec<CandidateEval>,
}

#[derive(Debug, Clone)]
pub struct PartitionNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub sub: SubSupernet,
    pub split: Option<NodeSplit>,
    /// `[group child, complement child]`
    pub children: Option<[usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct PartitionTree {
    nodes: Vec<PartitionNode>,
    rounds: usize,
}

impl PartitionTree {
    pub fn nodes(&self) -> &[PartitionNode] {
        &self.nodes
    }

    pub fn root(&self) -> &PartitionNode {
        &self.nodes[0]
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// The final partition, left to right.
    pub fn leaves(&self) -> Vec<&SubSupernet> {
        self.leaf_nodes().map(|n| &n.sub).collect()
    }

    fn leaf_nodes(&self) -> impl Iterator<Item = &PartitionNode> {
        let mut order = Vec::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match self.nodes[id].children {
                Some([a, b]) => {
                    stack.push(b);
                    stack.push(a);
                }
                None => order.push(id),
            }
        }
        order.into_iter().map(move |id| &self.nodes[id])
    }

    pub fn report(&self, spec: &SpaceSpec) -> PartitionReport {
        let names = |layer: usize, ops: &[usize]| -> Vec<String> {
            ops.iter().map(|&o| spec.layer(layer).ops[o].clone()).collect()
        };
        let mask_ops = |sub: &SubSupernet| -> Vec<Vec<String>> {
            (0..sub.num_layers())
                .map(|l| names(l, &sub.mask(l).ops().collect::<Vec<_>>()))
                .collect()
        };
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeReport {
                id: n.id,
                parent: n.parent,
                depth: n.depth,
                mask: n.sub.id(),
                subnets: n.sub.subnet_count() as u64,
                children: n.children,
                split: n.split.as_ref().map(|s| {
                    let width = n.sub.mask(s.layer).len();
                    let rest: Vec<usize> = (0..width).filter(|i| !s.group.contains(i)).collect();
                    SplitReport {
                        layer: s.layer,
                        layer_name: spec.layer(s.layer).name.clone(),
                        group: names(s.layer, &s.group),
                        rest: names(s.layer, &rest),
                        gamma: s.score,
                        candidates: s
                            .candidates
                            .iter()
                            .map(|c| CandidateReport {
                                layer: c.layer,
                                layer_name: spec.layer(c.layer).name.clone(),
                                group: names(c.layer, &c.bipartition.group),
                                gamma: c.bipartition.score,
                                separability: separability_score(&c.matrix).ok(),
                                profiles: c.profiles.clone(),
                                matrix: c.matrix.clone(),
                            })
                            .collect(),
                    }
                }),
            })
            .collect();
        let leaves = self
            .leaf_nodes()
            .map(|n| LeafReport {
                id: n.id,
                mask: n.sub.id(),
                subnets: n.sub.subnet_count() as u64,
                ops: mask_ops(&n.sub),
            })
            .collect();
        PartitionReport { rounds: self.rounds, nodes, leaves }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub rounds: usize,
    pub nodes: Vec<NodeReport>,
    pub leaves: Vec<LeafReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeReport {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub mask: String,
    pub subnets: u64,
    pub children: Option<[usize; 2]>,
    pub split: Option<SplitReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    pub layer: usize,
    pub layer_name: String,
    pub group: Vec<String>,
    pub rest: Vec<String>,
    pub gamma: f64,
    pub candidates: Vec<CandidateReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateReport {
    pub layer: usize,
    pub layer_name: String,
    pub group: Vec<String>,
    pub gamma: f64,
    pub separability: Option<f64>,
    pub profiles: Vec<LidProfile>,
    pub matrix: SimilarityMatrix,
}

#[derive(Debug, Clone, Serialize)]
pub struct LeafReport {
    pub id: usize,
    pub mask: String,
    pub subnets: u64,
    pub ops: Vec<Vec<String>>,
}

/// Runs `rounds` rounds of splitting starting from `root`.
pub fn run_partition(
    root: &SubSupernet,
    rounds: usize,
    sources: &dyn SourceFactory,
    hooks: &mut dyn PartitionHooks,
    cfg: &SplitConfig,
) -> Result<PartitionTree, PartitionError> {
    let mut nodes = vec![PartitionNode {
        id: 0,
        parent: None,
        depth: 0,
        sub: root.clone(),
        split: None,
        children: None,
    }];
    let mut frontier = vec![0usize];
    for round in 1..=rounds {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for &id in &frontier {
            let wrap = |e: PartitionError| PartitionError::Round { round, node: id, source: Box::new(e) };
            let sub = nodes[id].sub.clone();
            hooks.warmup(&sub, round).map_err(|e| wrap(PartitionError::Hook(e)))?;
            let source = sources.source_for(&sub, round).map_err(wrap)?;
            let out = split_supernet(&sub, source.as_ref(), cfg).map_err(wrap)?;
            let (a, b) = (nodes.len(), nodes.len() + 1);
            for child in [out.group_sub, out.rest_sub] {
                nodes.push(PartitionNode {
                    id: nodes.len(),
                    parent: Some(id),
                    depth: round,
                    sub: child,
                    split: None,
                    children: None,
                });
            }
            nodes[id].split = Some(NodeSplit {
                layer: out.layer,
                group: out.group,
                score: out.score,
                candidates: out.candidates,
            });
            nodes[id].children = Some([a, b]);
            next.extend([a, b]);
        }
        frontier = next;
    }
    for &id in &frontier {
        hooks
            .finetune(&nodes[id].sub)
            .map_err(|e| PartitionError::Round { round: rounds, node: id, source: Box::new(PartitionError::Hook(e)) })?;
    }
    Ok(PartitionTree { nodes, rounds })
}

/// Separability score of every unpartitioned layer of `sub`.
pub fn layer_separability(
    sub: &SubSupernet,
    source: &dyn ReprSource,
    cfg: &SplitConfig,
) -> Result<Vec<(usize, f64)>, PartitionError> {
    sub.unpartitioned_layers()
        .into_iter()
        .map(|l| {
            let eval = evaluate_layer(sub, l, source, cfg)?;
            Ok((l, separability_score(&eval.matrix)?))
        })
        .collect()
}

/// Writes `layer_name,D` rows.
pub fn write_separability_csv(
    path: impl AsRef<Path>,
    spec: &SpaceSpec,
    rows: &[(usize, f64)],
) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer_name", "D"])?;
    for (l, d) in rows {
        w.write_record([spec.layer(*l).name.as_str(), &d.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn euclidean_examples() {
        let p = [1.0, 2.0, 3.0];
        assert!(close(lid_similarity(&p, &p, Measure::Euclidean).unwrap(), 1e6, 1e-6));
        let s = lid_similarity(&[3.0, 4.0, 0.0], &[0.0, 0.0, 0.0], Measure::Euclidean).unwrap();
        assert!(close(s, 1.0 / (5.0 + 1e-6), 1e-15));
        assert!(close(s, 0.19999996, 1e-8));
    }

    #[test]
    fn pearson_vs_euclidean_scale() {
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, 20.0, 30.0];
        assert!(close(lid_similarity(&a, &b, Measure::Pearson).unwrap(), 1.0, 1e-12));
        let e = lid_similarity(&a, &b, Measure::Euclidean).unwrap();
        assert!(close(e, 1.0 / (1134f64.sqrt() + 1e-6), 1e-15));
        assert!(close(e, 0.02970, 1e-5));
    }

    #[test]
    fn similarity_errors() {
        assert!(matches!(
            lid_similarity(&[1.0], &[1.0, 2.0], Measure::Euclidean),
            Err(PartitionError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            lid_similarity(&[2.0, 2.0], &[1.0, 2.0], Measure::Pearson),
            Err(PartitionError::ConstantProfile)
        ));
        let err = similarity_matrix(&[vec![1.0, 2.0], vec![1.0, 3.0], vec![4.0, 4.0]], Measure::Pearson)
            .unwrap_err();
        assert!(matches!(err, PartitionError::Similarity { i: 0, j: 2, .. }));
    }

    #[test]
    fn matrix_examples() {
        let m = similarity_matrix(&[[1.0, 2.0], [1.0, 2.0]], Measure::Euclidean).unwrap();
        assert!(close(m.get(0, 1), 1e6, 1e-6) && m.get(0, 1) == m.get(1, 0));
        let m = similarity_matrix(&[[0.0], [3.0], [4.0]], Measure::Euclidean).unwrap();
        assert_eq!(m.get(0, 1), 1.0 / (3.0 + 1e-6));
        assert_eq!(m.get(0, 2), 1.0 / (4.0 + 1e-6));
        assert_eq!(m.get(1, 2), 1.0 / (1.0 + 1e-6));
        assert!(similarity_matrix(&[[1.0]], Measure::Euclidean).is_err());
    }

    fn block4(intra: f64, cross: f64) -> SimilarityMatrix {
        SimilarityMatrix::from_pairs(4, |i, j| if (i < 2) == (j < 2) { intra } else { cross })
    }

    #[test]
    fn bipartition_block_example() {
        let r = best_balanced_bipartition(&block4(10.0, 1.0)).unwrap();
        assert_eq!(r.group, vec![0, 1]);
        assert_eq!(r.score, 20.0);
    }

    #[test]
    fn bipartition_two_ops() {
        let s = SimilarityMatrix::from_pairs(2, |_, _| 3.0);
        let r = best_balanced_bipartition(&s).unwrap();
        assert_eq!(r.group, vec![0]);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn bipartition_bounds() {
        let s = SimilarityMatrix::from_pairs(21, |_, _| 1.0);
        assert!(matches!(best_balanced_bipartition(&s), Err(PartitionError::TooManyOps(21))));
        let s = SimilarityMatrix::from_pairs(1, |_, _| 1.0);
        assert!(matches!(best_balanced_bipartition(&s), Err(PartitionError::TooFewItems(1))));
    }

    #[test]
    fn bipartition_block_family() {
        for ratio in [1.1, 2.0, 10.0, 100.0] {
            let r = best_balanced_bipartition(&block4(ratio, 1.0)).unwrap();
            assert_eq!(r.group, vec![0, 1], "h/c = {ratio}");
        }
    }

    #[test]
    fn separability_examples() {
        let s = SimilarityMatrix::from_pairs(2, |_, _| 1.0);
        assert!(close(separability_score(&s).unwrap(), 1.0 / (2.0 * 2f64.sqrt()), 1e-12));
        let s = SimilarityMatrix::from_pairs(3, |_, _| 0.7);
        assert!(close(separability_score(&s).unwrap(), 0.0, 1e-12));
        // n != 3 with equal entries gives D != 0 under the 1/(2n) normalization.
        let s = SimilarityMatrix::from_pairs(5, |_, _| 1.0);
        assert!(separability_score(&s).unwrap() > 0.1);
    }

    #[test]
    fn matrix_from_entries_checks_symmetry() {
        assert!(SimilarityMatrix::from_entries(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(SimilarityMatrix::from_entries(2, vec![0.0, 1.0, 1.0]).is_err());
        assert!(SimilarityMatrix::from_entries(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn profile_validation() {
        assert!(LidProfile::new(vec![]).is_err());
        assert!(LidProfile::new(vec![1.0, 0.0]).is_err());
        assert!(LidProfile::new(vec![1.0, f64::NAN]).is_err());
        assert!(LidProfile::new(vec![1.0, 2.5]).is_ok());
    }
}
