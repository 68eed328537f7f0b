//! Supernet partitioning driven by layer-wise local intrinsic dimension (LID).
//!
//! A weight-sharing search space is modelled as `L` searchable layers, each with a
//! set of candidate operations. Sub-supernets restrict some layers to a subset of
//! their operations. The partition procedure repeatedly picks the unpartitioned
//! layer whose operations split most cleanly into two balanced groups, judged by
//! how similar the per-operation LID profiles are, and then the resulting leaves
//! are searched with a seeded evolutionary algorithm against a tabular benchmark.
//!
//! Module map:
//!
//! - [`lid`]: exact k-NN distances and the maximum-likelihood LID estimator.
//! - [`space`]: search-space description, operation masks, sub-supernets and
//!   architecture encodings.
//! - [`repr`]: providers of per-layer representations (synthetic or on-disk
//!   `LIDT` blobs) and the layer-output composition rule.
//! - [`partition`]: LID profiles, similarity matrices, the balanced bipartition
//!   solver, separability scores and the multi-round partition driver.
//! - [`evo`]: tabular benchmark ingestion and evolutionary search.
//! - [`metrics`]: Kendall/Spearman rank correlation and profile CSV emission.
//! - [`cli`]: the `lidpart` command-line front end.

pub mod cli;
pub mod evo;
pub mod lid;
pub mod metrics;
pub mod partition;
pub mod repr;
pub mod space;

mod seed;

pub use crate::evo::{EvoConfig, SearchHistory, TabularBenchmark};
pub use crate::lid::{LidConfig, LidEstimate, NeighborDistances, TensorBatch};
pub use crate::partition::{LidProfile, Measure, PartitionTree, SimilarityMatrix};
pub use crate::repr::{FileSource, ReprSource, SyntheticSource};
pub use crate::space::{ArchEncoding, OpMask, SpaceSpec, SubSupernet};
