//! Search-space model: layers of candidate operations, per-layer operation
//! masks, sub-supernets and architecture encodings.
//!
//! A cell-based space such as NAS-Bench-201 is represented by treating every
//! edge of the cell DAG as one searchable layer.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on operations per layer (masks are stored as `u64`).
pub const MAX_OPS: usize = 64;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid space description: {0}")]
    InvalidSpace(String),
    #[error("cannot read space file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse space file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("layer {layer} is already split (mask {mask})")]
    AlreadySplit { layer: usize, mask: String },
    #[error("sub-supernets differ outside layer {layer}")]
    IncompatibleSubs { layer: usize },
    #[error("cannot merge an empty group")]
    EmptyGroup,
    #[error("expected {expected} layers, got {got}")]
    SpecMismatch { expected: usize, got: usize },
    #[error("operation {op} out of range at layer {layer} ({count} ops)")]
    UnknownOp { layer: usize, op: usize, count: usize },
    #[error("malformed architecture encoding {0:?}")]
    BadEncoding(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

/// One searchable layer and its candidate operation names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub ops: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpaceFile", into = "SpaceFile")]
pub struct SpaceSpec {
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct SpaceFile {
    layers: Vec<LayerSpec>,
}

impl TryFrom<SpaceFile> for SpaceSpec {
    type Error = SpaceError;
    fn try_from(f: SpaceFile) -> Result<Self, SpaceError> {
        SpaceSpec::new(f.layers)
    }
}

impl From<SpaceSpec> for SpaceFile {
    fn from(s: SpaceSpec) -> Self {
        SpaceFile { layers: s.layers }
    }
}

/// Canonical NAS-Bench-201 operation order; encodings index into it.
pub const NB201_OPS: [&str; 5] =
    ["none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3"];

/// NAS-Bench-201 cell edges `src->dst`, in the benchmark's string order.
pub const NB201_EDGES: [&str; 6] = ["0->1", "0->2", "1->2", "0->3", "1->3", "2->3"];

impl SpaceSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, SpaceError> {
        if layers.is_empty() {
            return Err(SpaceError::InvalidSpace("no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.ops.len() < 2 {
                return Err(SpaceError::InvalidSpace(format!(
                    "layer {l} ({}) needs at least 2 operations",
                    layer.name
                )));
            }
            if layer.ops.len() > MAX_OPS {
                return Err(SpaceError::InvalidSpace(format!(
                    "layer {l} has {} operations, limit is {MAX_OPS}",
                    layer.ops.len()
                )));
            }
            for (i, op) in layer.ops.iter().enumerate() {
                if op.is_empty() {
                    return Err(SpaceError::InvalidSpace(format!("layer {l}: empty op name")));
                }
                if layer.ops[..i].contains(op) {
                    return Err(SpaceError::InvalidSpace(format!(
                        "layer {l}: duplicate operation {op:?}"
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    /// `num_layers` layers sharing the same operation list.
    pub fn uniform(num_layers: usize, ops: &[&str]) -> Result<Self, SpaceError> {
        let layers = (0..num_layers)
            .map(|l| LayerSpec {
                name: format!("layer{l}"),
                ops: ops.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        Self::new(layers)
    }

    /// The NAS-Bench-201 cell: 6 edges x 5 operations.
    pub fn nas_bench_201() -> Self {
        let layers = NB201_EDGES
            .iter()
            .map(|e| LayerSpec {
                name: e.to_string(),
                ops: NB201_OPS.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        Self::new(layers).expect("built-in space is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpaceError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerSpec {
        &self.layers[l]
    }

    pub fn op_count(&self, l: usize) -> usize {
        self.layers[l].ops.len()
    }

    /// Supernet covering the whole space.
    pub fn root(&self) -> SubSupernet {
        SubSupernet { masks: self.layers.iter().map(|l| OpMask::full(l.ops.len())).collect() }
    }

    pub fn total_subnets(&self) -> u128 {
        self.root().subnet_count()
    }

    pub fn validate_arch(&self, arch: &ArchEncoding) -> Result<(), SpaceError> {
        if arch.len() != self.num_layers() {
            return Err(SpaceError::SpecMismatch { expected: self.num_layers(), got: arch.len() });
        }
        for (layer, &op) in arch.choices().iter().enumerate() {
            let count = self.op_count(layer);
            if op >= count {
                return Err(SpaceError::UnknownOp { layer, op, count });
            }
        }
        Ok(())
    }

    /// Checks that `sub` has one mask per layer with matching widths.
    pub fn validate_sub(&self, sub: &SubSupernet) -> Result<(), SpaceError> {
        if sub.num_layers() != self.num_layers() {
            return Err(SpaceError::SpecMismatch { expected: self.num_layers(), got: sub.num_layers() });
        }
        for (l, m) in sub.masks().iter().enumerate() {
            if m.len() != self.op_count(l) {
                return Err(SpaceError::InvalidMask(format!(
                    "layer {l}: mask width {} but {} ops",
                    m.len(),
                    self.op_count(l)
                )));
            }
        }
        Ok(())
    }
}

/// Which candidate operations of one layer remain active.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpMask {
    bits: u64,
    len: u8,
}

impl OpMask {
    pub fn full(len: usize) -> Self {
        assert!((1..=MAX_OPS).contains(&len));
        let bits = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        Self { bits, len: len as u8 }
    }

    pub fn singleton(len: usize, op: usize) -> Self {
        assert!(op < len && len <= MAX_OPS);
        Self { bits: 1 << op, len: len as u8 }
    }

    pub fn from_ops(len: usize, ops: &[usize]) -> Result<Self, SpaceError> {
        if len == 0 || len > MAX_OPS {
            return Err(SpaceError::InvalidMask(format!("width {len}")));
        }
        let mut bits = 0u64;
        for &op in ops {
            if op >= len {
                return Err(SpaceError::InvalidMask(format!("op {op} beyond width {len}")));
            }
            bits |= 1 << op;
        }
        if bits == 0 {
            return Err(SpaceError::InvalidMask("no operation selected".into()));
        }
        Ok(Self { bits, len: len as u8 })
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.len()
    }

    pub fn contains(&self, op: usize) -> bool {
        op < self.len() && self.bits >> op & 1 == 1
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    /// Active operation indices, ascending.
    pub fn ops(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.contains(i))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.contains(i)).collect()
    }

    fn union(self, other: Self) -> Self {
        Self { bits: self.bits | other.bits, len: self.len }
    }
}

/// Renders op 0 first, e.g. `10010` for ops {0, 3} of 5.
impl fmt::Display for OpMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            f.write_str(if self.contains(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for OpMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OpMask({self})")
    }
}

impl FromStr for OpMask {
    type Err = SpaceError;
    fn from_str(s: &str) -> Result<Self, SpaceError> {
        let ops: Vec<usize> = s
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '1' => Ok(Some(i)),
                '0' => Ok(None),
                _ => Err(SpaceError::InvalidMask(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        Self::from_ops(s.len(), &ops)
    }
}

/// A region of the search space: one non-empty operation mask per layer.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubSupernet {
    masks: Vec<OpMask>,
}

impl SubSupernet {
    pub fn new(masks: Vec<OpMask>) -> Result<Self, SpaceError> {
        if masks.is_empty() {
            return Err(SpaceError::InvalidMask("no layers".into()));
        }
        if let Some(l) = masks.iter().position(|m| m.is_empty()) {
            return Err(SpaceError::InvalidMask(format!("layer {l} has no active op")));
        }
        Ok(Self { masks })
    }

    /// Stable identifier: the layer masks joined by `-`.
    pub fn id(&self) -> String {
        self.masks.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn masks(&self) -> &[OpMask] {
        &self.masks
    }

    pub fn mask(&self, layer: usize) -> &OpMask {
        &self.masks[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.masks.len()
    }

    /// Product of per-layer active operation counts.
    pub fn subnet_count(&self) -> u128 {
        self.masks.iter().map(|m| m.count() as u128).product()
    }

    /// Layers whose mask is still all-ones.
    pub fn unpartitioned_layers(&self) -> Vec<usize> {
        (0..self.masks.len()).filter(|&l| self.masks[l].is_full()).collect()
    }

    fn check_layer(&self, layer: usize) -> Result<(), SpaceError> {
        if layer >= self.masks.len() {
            return Err(SpaceError::LayerOutOfRange { layer, layers: self.masks.len() });
        }
        Ok(())
    }

    /// Copy of `self` with `layer` restricted to `mask`.
    pub fn with_layer_mask(&self, layer: usize, mask: OpMask) -> Result<Self, SpaceError> {
        self.check_layer(layer)?;
        if mask.len() != self.masks[layer].len() || mask.is_empty() {
            return Err(SpaceError::InvalidMask(format!("layer {layer}: {mask}")));
        }
        let mut masks = self.masks.clone();
        masks[layer] = mask;
        Ok(Self { masks })
    }

    /// One sub-supernet per operation of an unpartitioned layer, in op order.
    pub fn split_layer(&self, layer: usize) -> Result<Vec<Self>, SpaceError> {
        self.check_layer(layer)?;
        let mask = self.masks[layer];
        if !mask.is_full() {
            return Err(SpaceError::AlreadySplit { layer, mask: mask.to_string() });
        }
        Ok(mask
            .ops()
            .map(|op| {
                let mut masks = self.masks.clone();
                masks[layer] = OpMask::singleton(mask.len(), op);
                Self { masks }
            })
            .collect())
    }

    /// Whether `arch` selects an active operation at every layer.
    pub fn contains(&self, arch: &ArchEncoding) -> Result<bool, SpaceError> {
        if arch.len() != self.masks.len() {
            return Err(SpaceError::SpecMismatch { expected: self.masks.len(), got: arch.len() });
        }
        Ok(self.masks.iter().zip(arch.choices()).all(|(m, &op)| m.contains(op)))
    }

    /// Every architecture in this region, in odometer order (last layer fastest).
    pub fn archs(&self) -> impl Iterator<Item = ArchEncoding> + '_ {
        let active: Vec<Vec<usize>> = self.masks.iter().map(|m| m.ops().collect()).collect();
        let mut cursor: Option<Vec<usize>> = Some(vec![0; active.len()]);
        std::iter::from_fn(move || {
            let idx = cursor.as_mut()?;
            let arch = ArchEncoding::new(idx.iter().zip(&active).map(|(&i, a)| a[i]).collect());
            let mut l = idx.len();
            loop {
                if l == 0 {
                    cursor = None;
                    break;
                }
                l -= 1;
                idx[l] += 1;
                if idx[l] < active[l].len() {
                    break;
                }
                idx[l] = 0;
            }
            Some(arch)
        })
    }

    /// Uniform draw from the architectures of this region.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchEncoding {
        ArchEncoding::new(
            self.masks
                .iter()
                .map(|m| {
                    let ops: Vec<usize> = m.ops().collect();
                    ops[rng.random_range(0..ops.len())]
                })
                .collect(),
        )
    }
}

impl fmt::Debug for SubSupernet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SubSupernet({})", self.id())
    }
}

/// OR-merge sub-supernets that differ only at `layer`.
pub fn merge_group(subs: &[SubSupernet], layer: usize) -> Result<SubSupernet, SpaceError> {
    let first = subs.first().ok_or(SpaceError::EmptyGroup)?;
    first.check_layer(layer)?;
    let mut merged = first.clone();
    for s in &subs[1..] {
        if s.masks.len() != first.masks.len() {
            return Err(SpaceError::SpecMismatch { expected: first.masks.len(), got: s.masks.len() });
        }
        let differs = s
            .masks
            .iter()
            .zip(&first.masks)
            .enumerate()
            .any(|(l, (a, b))| l != layer && a != b);
        if differs || s.masks[layer].len() != first.masks[layer].len() {
            return Err(SpaceError::IncompatibleSubs { layer });
        }
        merged.masks[layer] = merged.masks[layer].union(s.masks[layer]);
    }
    Ok(merged)
}

/// A concrete architecture: one operation index per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchEncoding(Vec<usize>);

impl Serialize for ArchEncoding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl ArchEncoding {
    pub fn new(choices: Vec<usize>) -> Self {
        Self(choices)
    }

    pub fn choices(&self) -> &[usize] {
        &self.0
    }

    pub fn choices_mut(&mut self) -> &mut [usize] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `0-3-1-2-4-4`
impl fmt::Display for ArchEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchEncoding {
    type Err = SpaceError;
    fn from_str(s: &str) -> Result<Self, SpaceError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(SpaceError::BadEncoding(s.to_string()));
        }
        s.split('-')
            .map(|p| p.parse::<usize>().map_err(|_| SpaceError::BadEncoding(s.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb201() -> SpaceSpec {
        SpaceSpec::nas_bench_201()
    }

    #[test]
    fn nb201_subnet_counts() {
        let root = nb201().root();
        assert_eq!(root.subnet_count(), 15625);
        let single = SubSupernet::new(vec![OpMask::singleton(5, 1); 6]).unwrap();
        assert_eq!(single.subnet_count(), 1);
        let two = root.with_layer_mask(3, OpMask::from_ops(5, &[0, 4]).unwrap()).unwrap();
        assert_eq!(two.subnet_count(), 6250);
        let three = root.with_layer_mask(3, OpMask::from_ops(5, &[1, 2, 3]).unwrap()).unwrap();
        assert_eq!(two.subnet_count() + three.subnet_count(), 15625);
    }

    #[test]
    fn split_full_layer() {
        let parts = nb201().root().split_layer(0).unwrap();
        assert_eq!(parts.len(), 5);
        for (op, p) in parts.iter().enumerate() {
            assert_eq!(p.subnet_count(), 3125);
            assert_eq!(p.mask(0).ops().collect::<Vec<_>>(), vec![op]);
        }
        let two = SpaceSpec::uniform(2, &["a", "b"]).unwrap().root().split_layer(1).unwrap();
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn split_rejects_partitioned_layer() {
        let sub = nb201().root().with_layer_mask(2, "01100".parse().unwrap()).unwrap();
        assert!(matches!(sub.split_layer(2), Err(SpaceError::AlreadySplit { layer: 2, .. })));
        assert!(matches!(sub.split_layer(6), Err(SpaceError::LayerOutOfRange { .. })));
    }

    #[test]
    fn merge_examples() {
        let parts = nb201().root().split_layer(2).unwrap();
        let merged = merge_group(&[parts[0].clone(), parts[3].clone()], 2).unwrap();
        assert_eq!(merged.mask(2).to_string(), "10010");
        assert_eq!(merge_group(&parts[1..2], 2).unwrap(), parts[1]);
        let other = parts[0].with_layer_mask(1, OpMask::singleton(5, 0)).unwrap();
        assert!(matches!(
            merge_group(&[parts[3].clone(), other], 2),
            Err(SpaceError::IncompatibleSubs { layer: 2 })
        ));
        assert!(matches!(merge_group(&[], 0), Err(SpaceError::EmptyGroup)));
    }

    #[test]
    fn split_merge_round_trip() {
        let root = nb201().root();
        for l in 0..6 {
            assert_eq!(merge_group(&root.split_layer(l).unwrap(), l).unwrap(), root);
        }
    }

    #[test]
    fn contains_examples() {
        let spec = nb201();
        let root = spec.root();
        let arch: ArchEncoding = "0-3-1-2-4-4".parse().unwrap();
        assert!(root.contains(&arch).unwrap());
        let single = SubSupernet::new(
            arch.choices().iter().map(|&c| OpMask::singleton(5, c)).collect(),
        )
        .unwrap();
        assert!(single.contains(&arch).unwrap());
        assert!(!single.contains(&"0-3-1-2-4-3".parse().unwrap()).unwrap());
        assert!(matches!(
            root.contains(&"0-1".parse().unwrap()),
            Err(SpaceError::SpecMismatch { expected: 6, got: 2 })
        ));
    }

    #[test]
    fn bipartition_is_exclusive_over_nb201() {
        let root = nb201().root();
        let g = root.with_layer_mask(4, OpMask::from_ops(5, &[1, 3]).unwrap()).unwrap();
        let h = root.with_layer_mask(4, OpMask::from_ops(5, &[0, 2, 4]).unwrap()).unwrap();
        let mut n = 0;
        for arch in root.archs() {
            let a = g.contains(&arch).unwrap();
            let b = h.contains(&arch).unwrap();
            assert!(a ^ b, "{arch} in both or neither");
            n += 1;
        }
        assert_eq!(n, 15625);
    }

    #[test]
    fn archs_enumerates_region() {
        let sub = nb201()
            .root()
            .with_layer_mask(0, OpMask::from_ops(5, &[1, 4]).unwrap())
            .unwrap()
            .with_layer_mask(5, OpMask::singleton(5, 2))
            .unwrap();
        let all: Vec<_> = sub.archs().collect();
        assert_eq!(all.len() as u128, sub.subnet_count());
        assert!(all.iter().all(|a| sub.contains(a).unwrap()));
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
    }

    #[test]
    fn encoding_parse_and_display() {
        let a: ArchEncoding = "0-3-1-2-4-4".parse().unwrap();
        assert_eq!(a.choices(), &[0, 3, 1, 2, 4, 4]);
        assert_eq!(a.to_string(), "0-3-1-2-4-4");
        assert!("0--1".parse::<ArchEncoding>().is_err());
        assert!("".parse::<ArchEncoding>().is_err());
        assert!(matches!(
            nb201().validate_arch(&"0-3-1-2-9-4".parse().unwrap()),
            Err(SpaceError::UnknownOp { layer: 4, op: 9, count: 5 })
        ));
    }

    #[test]
    fn space_file_round_trip_and_validation() {
        let spec = nb201();
        assert_eq!(SpaceSpec::from_json(&spec.to_json()).unwrap(), spec);
        let text = r#"{"layers":[{"name":"a","ops":["x","y","z"]},{"name":"b","ops":["p","q"]}]}"#;
        let s = SpaceSpec::from_json(text).unwrap();
        assert_eq!(s.num_layers(), 2);
        assert_eq!(s.total_subnets(), 6);
        assert!(SpaceSpec::from_json(r#"{"layers":[]}"#).is_err());
        assert!(SpaceSpec::from_json(r#"{"layers":[{"name":"a","ops":["x"]}]}"#).is_err());
        assert!(SpaceSpec::from_json(r#"{"layers":[{"name":"a","ops":["x","x"]}]}"#).is_err());
    }

    #[test]
    fn mask_parse() {
        let m: OpMask = "10010".parse().unwrap();
        assert_eq!(m.ops().collect::<Vec<_>>(), vec![0, 3]);
        assert!("00000".parse::<OpMask>().is_err());
        assert!("10a".parse::<OpMask>().is_err());
    }
}
