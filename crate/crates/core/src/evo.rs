//! Evolutionary search over the leaves of a partition, with fitness taken from
//! a tabular benchmark's validation accuracy.
//!
//! Each generation: tournament selection, single-point crossover along the
//! layer axis, per-layer mutation that resamples within the first parent's
//! leaf, and elitism. Offspring are projected back into the first parent's
//! leaf, so every individual always belongs to exactly one leaf.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{ArchEncoding, SpaceError, SpaceSpec, SubSupernet};

pub const BENCHMARK_HEADER: [&str; 3] = ["encoding", "val_acc", "test_acc"];
pub const HISTORY_HEADER: &str = "epoch,mean_val,std_val,best_val,best_encoding";

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("benchmark line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("benchmark line {line}: {source}")]
    UnknownOp { line: u64, source: SpaceError },
    #[error("duplicate encoding {0}")]
    DuplicateEncoding(String),
    #[error("benchmark has no record for {0}")]
    CoverageGap(String),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("architecture {0} is outside every leaf")]
    NotInLeaf(String),
    #[error("empty search history")]
    EmptyHistory,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Accuracy table keyed by architecture encoding.
#[derive(Debug, Clone, Default)]
pub struct TabularBenchmark {
    records: HashMap<ArchEncoding, BenchRecord>,
}

impl TabularBenchmark {
    /// Builds from in-memory records, rejecting duplicates and out-of-range
    /// accuracies.
    pub fn from_records(
        spec: &SpaceSpec,
        records: impl IntoIterator<Item = (ArchEncoding, BenchRecord)>,
    ) -> Result<Self, EvoError> {
        let mut out = HashMap::new();
        for (i, (arch, rec)) in records.into_iter().enumerate() {
            let line = i as u64 + 2;
            spec.validate_arch(&arch).map_err(|source| EvoError::UnknownOp { line, source })?;
            check_accuracy(line, rec)?;
            if out.contains_key(&arch) {
                return Err(EvoError::DuplicateEncoding(arch.to_string()));
            }
            out.insert(arch, rec);
        }
        Ok(Self { records: out })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, arch: &ArchEncoding) -> Option<&BenchRecord> {
        self.records.get(arch)
    }

    pub fn val_acc(&self, arch: &ArchEncoding) -> Result<f64, EvoError> {
        self.get(arch).map(|r| r.val_acc).ok_or_else(|| EvoError::CoverageGap(arch.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ArchEncoding, &BenchRecord)> {
        self.records.iter()
    }

    /// Whether every architecture of `spec` has a record. Records are unique
    /// and validated, so a size match is sufficient.
    pub fn covers(&self, spec: &SpaceSpec) -> bool {
        self.records.len() as u128 == spec.total_subnets()
    }

    /// First architecture of `spec` (odometer order) lacking a record.
    pub fn first_gap(&self, spec: &SpaceSpec) -> Option<ArchEncoding> {
        if self.covers(spec) {
            return None;
        }
        spec.root().archs().find(|a| !self.records.contains_key(a))
    }

    /// Rows sorted by encoding, so output is deterministic.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvoError> {
        let mut rows: Vec<_> = self.records.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(BENCHMARK_HEADER).map_err(csv_io)?;
        for (arch, r) in rows {
            w.write_record([arch.to_string(), r.val_acc.to_string(), r.test_acc.to_string()])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> EvoError {
    EvoError::Io(e.into())
}

fn check_accuracy(line: u64, r: BenchRecord) -> Result<(), EvoError> {
    for v in [r.val_acc, r.test_acc] {
        if !(0.0..=100.0).contains(&v) {
            return Err(EvoError::Parse { line, msg: format!("accuracy {v} outside [0, 100]") });
        }
    }
    Ok(())
}

/// Reads a `encoding,val_acc,test_acc` CSV.
pub fn load_benchmark(path: impl AsRef<Path>, spec: &SpaceSpec) -> Result<TabularBenchmark, EvoError> {
    parse_benchmark(fs::File::open(path)?, spec)
}

pub fn parse_benchmark<R: Read>(reader: R, spec: &SpaceSpec) -> Result<TabularBenchmark, EvoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| EvoError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != BENCHMARK_HEADER {
        return Err(EvoError::Parse {
            line: 1,
            msg: format!("expected header {:?}, got {:?}", BENCHMARK_HEADER.join(","), header),
        });
    }
    let mut records = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| EvoError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let parse_err = |msg: String| EvoError::Parse { line, msg };
        let arch: ArchEncoding = row[0].parse().map_err(|e: SpaceError| parse_err(e.to_string()))?;
        spec.validate_arch(&arch).map_err(|source| match source {
            SpaceError::UnknownOp { .. } => EvoError::UnknownOp { line, source },
            other => parse_err(other.to_string()),
        })?;
        let num = |i: usize| {
            row[i].parse::<f64>().map_err(|e| parse_err(format!("{:?}: {e}", &row[i])))
        };
        let rec = BenchRecord { val_acc: num(1)?, test_acc: num(2)? };
        check_accuracy(line, rec)?;
        if records.insert(arch.clone(), rec).is_some() {
            return Err(EvoError::DuplicateEncoding(arch.to_string()));
        }
    }
    Ok(TabularBenchmark { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvoConfig {
    pub population_size: usize,
    pub epochs: usize,
    /// Per-layer resampling probability.
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub seed: u64,
    pub tournament_size: usize,
    /// Best individuals copied unchanged into the next generation.
    pub elitism: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            epochs: 50,
            mutation_rate: 0.1,
            crossover_rate: 0.5,
            seed: 0,
            tournament_size: 5,
            elitism: 1,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        let bad = |m: &str| Err(EvoError::InvalidConfig(m.to_string()));
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be at least 1");
        }
        if self.elitism >= self.population_size {
            return bad("elitism must be smaller than population_size");
        }
        for (name, r) in [("mutation_rate", self.mutation_rate), ("crossover_rate", self.crossover_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(EvoError::InvalidConfig(format!("{name} = {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_val: f64,
    pub std_val: f64,
    pub best_val: f64,
    pub best_encoding: ArchEncoding,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchHistory {
    pub epochs: Vec<EpochRecord>,
}

impl SearchHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch, e.mean_val, e.std_val, e.best_val, e.best_encoding
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

/// Runs the search with a population seeded uniformly across `leaves`.
pub fn evolve(
    leaves: &[SubSupernet],
    bench: &TabularBenchmark,
    cfg: &EvoConfig,
) -> Result<SearchHistory, EvoError> {
    evolve_with(leaves, bench, cfg, None, |_, _| {})
}

/// Like [`evolve`], optionally from a given initial population, calling
/// `observe(epoch, population)` once per epoch.
pub fn evolve_with(
    leaves: &[SubSupernet],
    bench: &TabularBenchmark,
    cfg: &EvoConfig,
    initial: Option<Vec<ArchEncoding>>,
    mut observe: impl FnMut(usize, &[ArchEncoding]),
) -> Result<SearchHistory, EvoError> {
    cfg.validate()?;
    if leaves.is_empty() {
        return Err(EvoError::InvalidConfig("no leaves to search".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = match initial {
        Some(p) => {
            if p.len() != cfg.population_size {
                return Err(EvoError::InvalidConfig(format!(
                    "initial population has {} members, population_size is {}",
                    p.len(),
                    cfg.population_size
                )));
            }
            for a in &p {
                leaf_of(leaves, a)?;
            }
            p
        }
        None => initial_population(leaves, cfg.population_size, &mut rng),
    };

    let mut history = SearchHistory::default();
    let mut best: Option<(f64, ArchEncoding)> = None;
    for epoch in 1..=cfg.epochs {
        let fitness = pop.iter().map(|a| bench.val_acc(a)).collect::<Result<Vec<_>, _>>()?;
        for (a, &f) in pop.iter().zip(&fitness) {
            if best.as_ref().is_none_or(|(b, _)| f > *b) {
                best = Some((f, a.clone()));
            }
        }
        let n = fitness.len() as f64;
        let mean = fitness.iter().sum::<f64>() / n;
        let var = fitness.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
        let (best_val, best_arch) = best.clone().expect("population is non-empty");
        history.epochs.push(EpochRecord {
            epoch,
            mean_val: mean,
            std_val: var.sqrt(),
            best_val,
            best_encoding: best_arch,
        });
        observe(epoch, &pop);
        if epoch == cfg.epochs {
            break;
        }
        pop = next_generation(leaves, &pop, &fitness, cfg, &mut rng)?;
    }
    Ok(history)
}

fn leaf_of(leaves: &[SubSupernet], arch: &ArchEncoding) -> Result<usize, EvoError> {
    leaves
        .iter()
        .position(|l| l.contains(arch).unwrap_or(false))
        .ok_or_else(|| EvoError::NotInLeaf(arch.to_string()))
}

/// `size / leaves` members per leaf, remainder to the earliest leaves. Within a
/// leaf, members are distinct whenever the leaf is large enough; a quota that
/// covers the whole leaf takes every architecture of it.
fn initial_population(leaves: &[SubSupernet], size: usize, rng: &mut ChaCha8Rng) -> Vec<ArchEncoding> {
    let base = size / leaves.len();
    let extra = size % leaves.len();
    let mut pop = Vec::with_capacity(size);
    for (i, leaf) in leaves.iter().enumerate() {
        let quota = base + usize::from(i < extra);
        if quota as u128 >= leaf.subnet_count() {
            pop.extend(leaf.archs());
            let have = leaf.subnet_count() as usize;
            for _ in have..quota {
                pop.push(leaf.sample(rng));
            }
        } else {
            let mut seen = HashSet::with_capacity(quota);
            while seen.len() < quota {
                let a = leaf.sample(rng);
                if seen.insert(a.clone()) {
                    pop.push(a);
                }
            }
        }
    }
    pop
}

fn tournament(fitness: &[f64], size: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut winner = rng.random_range(0..fitness.len());
    for _ in 1..size {
        let c = rng.random_range(0..fitness.len());
        if fitness[c] > fitness[winner] {
            winner = c;
        }
    }
    winner
}

fn next_generation(
    leaves: &[SubSupernet],
    pop: &[ArchEncoding],
    fitness: &[f64],
    cfg: &EvoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ArchEncoding>, EvoError> {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
    let mut next: Vec<ArchEncoding> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
    let layers = pop[0].len();
    while next.len() < cfg.population_size {
        let first = tournament(fitness, cfg.tournament_size, rng);
        let mut child = pop[first].clone();
        if rng.random::<f64>() < cfg.crossover_rate && layers > 1 {
            let second = tournament(fitness, cfg.tournament_size, rng);
            let cut = rng.random_range(1..layers);
            child.choices_mut()[cut..].copy_from_slice(&pop[second].choices()[cut..]);
        }
        let leaf = &leaves[leaf_of(leaves, &pop[first])?];
        for l in 0..layers {
            let mask = leaf.mask(l);
            let mutate = rng.random::<f64>() < cfg.mutation_rate;
            if mutate || !mask.contains(child.choices()[l]) {
                let ops: Vec<usize> = mask.ops().collect();
                child.choices_mut()[l] = ops[rng.random_range(0..ops.len())];
            }
        }
        next.push(child);
    }
    Ok(next)
}

/// Final best-so-far architecture and its test accuracy.
pub fn best_architecture(
    history: &SearchHistory,
    bench: &TabularBenchmark,
) -> Result<(ArchEncoding, f64), EvoError> {
    let best = history.best().ok_or(EvoError::EmptyHistory)?;
    let rec = bench
        .get(&best.best_encoding)
        .ok_or_else(|| EvoError::CoverageGap(best.best_encoding.to_string()))?;
    Ok((best.best_encoding.clone(), rec.test_acc))
}
