//! `lidpart` command-line front end.
//!
//! Every subcommand reads one JSON run configuration (`--config`), applies any
//! `--set key=value` overrides, writes its outputs under `output_dir`, and
//! prints a one-line summary. Exit codes: 0 success, 1 usage error, 2 data or
//! validation error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::evo::{self, EvoConfig, TabularBenchmark};
use crate::lid::{self, DegeneratePolicy, LidConfig, LID_MAX};
use crate::metrics;
use crate::partition::{self, Measure, NoopHooks, SharedSource, SplitConfig};
use crate::repr::{self, ProfilePlan, ReprSource};
use crate::seed;
use crate::space::{ArchEncoding, OpMask, SpaceSpec, SubSupernet};

pub const CONFIG_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "LIDPART_THREADS";

const CONFIG_HELP: &str = "\
Run configuration (JSON), with defaults:
  config_version   required, must be 1
  seed             0; component seeds are derived from it
  space            path to a space file; built-in NAS-Bench-201 cell if absent
  provider         {\"kind\": \"synthetic\", \"b\": 128, \"m\": 64,
                    \"plan\": {\"dims\": {op: d}, \"layers\": {layer: {op: d}}}}
                   or {\"kind\": \"files\", \"manifest\": path}
  k                20
  measure          \"euclidean\" | \"pearson\" (default euclidean)
  rounds           partition rounds T, default 0
  clamp_degenerate false; when true an all-equal neighbourhood yields 1e6
  evo              {population_size: 50, epochs: 50, mutation_rate: 0.1,
                    crossover_rate: 0.5, tournament_size: 5, elitism: 1}
  benchmark        path to encoding,val_acc,test_acc CSV (evo-search, rank-eval)
  output_dir       \"out\"
  lid_estimate     {\"input\": LIDT path} or {\"synthetic\": {\"d\", \"ambient\", \"n\"}}
  rank_eval        {\"predictions\": encoding,score CSV, \"top_k\": null}
  emit_profiles    {\"archs\": [encoding, ...], \"include_supernet\": true}
Relative paths resolve against the config file's directory.
Environment: LIDPART_THREADS caps worker threads (default: all cores).";

#[derive(Parser, Debug)]
#[command(name = "lidpart", version, about = "LID-based supernet partitioning and search", after_long_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the LID of one tensor batch.
    LidEstimate(CommonArgs),
    /// Partition the supernet for `rounds` rounds and write the partition report.
    Split(CommonArgs),
    /// Separability score of every layer of the supernet.
    Separability(CommonArgs),
    /// Partition, then run evolutionary search over the leaves.
    EvoSearch(CommonArgs),
    /// Kendall/Spearman correlation of predicted scores against the benchmark.
    RankEval(CommonArgs),
    /// Write layer-wise LID profiles as CSV.
    EmitProfiles(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set rounds=2 --set evo.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    std::io::Error,
    serde_json::Error,
    crate::space::SpaceError,
    crate::lid::LidError,
    crate::repr::ReprError,
    crate::repr::TensorFormatError,
    crate::partition::PartitionError,
    crate::evo::EvoError,
    crate::metrics::MetricsError,
    csv::Error
);

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum ProviderConfig {
    Synthetic {
        #[serde(default = "default_batch")]
        b: usize,
        #[serde(default = "default_width")]
        m: usize,
        plan: ProfilePlan,
    },
    Files {
        manifest: PathBuf,
    },
}

fn default_batch() -> usize {
    lid::DEFAULT_BATCH
}

fn default_width() -> usize {
    64
}

fn default_k() -> usize {
    lid::DEFAULT_K
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvoSection {
    population_size: usize,
    epochs: usize,
    mutation_rate: f64,
    crossover_rate: f64,
    tournament_size: usize,
    elitism: usize,
}

impl Default for EvoSection {
    fn default() -> Self {
        let d = EvoConfig::default();
        Self {
            population_size: d.population_size,
            epochs: d.epochs,
            mutation_rate: d.mutation_rate,
            crossover_rate: d.crossover_rate,
            tournament_size: d.tournament_size,
            elitism: d.elitism,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSpec {
    d: usize,
    ambient: usize,
    n: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LidEstimateSection {
    input: Option<PathBuf>,
    synthetic: Option<SynthSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RankEvalSection {
    predictions: Option<PathBuf>,
    top_k: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmitProfilesSection {
    archs: Vec<String>,
    include_supernet: bool,
}

impl Default for EmitProfilesSection {
    fn default() -> Self {
        Self { archs: Vec::new(), include_supernet: true }
    }
}

/// Parsed run configuration with paths already resolved.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    config_version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    space: Option<PathBuf>,
    #[serde(default)]
    provider: Option<ProviderConfig>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default)]
    measure: Measure,
    #[serde(default)]
    rounds: usize,
    #[serde(default)]
    clamp_degenerate: bool,
    #[serde(default)]
    evo: EvoSection,
    #[serde(default)]
    benchmark: Option<PathBuf>,
    #[serde(default = "default_output")]
    output_dir: PathBuf,
    #[serde(default)]
    lid_estimate: LidEstimateSection,
    #[serde(default)]
    rank_eval: RankEvalSection,
    #[serde(default)]
    emit_profiles: EmitProfilesSection,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad --set key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: {p:?} is not inside an object")))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| json!({}));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("--set {key}: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn apply_overrides(root: &mut Value, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(root, k.trim(), value)?;
    }
    Ok(())
}

impl RunConfig {
    fn load(path: &Path, sets: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut raw: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        apply_overrides(&mut raw, sets)?;
        let mut cfg: RunConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(CliError::Data(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                cfg.config_version
            )));
        }
        if cfg.k == 0 {
            return Err(CliError::Data("k must be at least 1".into()));
        }
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve(&base);
        cfg.check_files()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.space.as_mut().map(fix);
        self.benchmark.as_mut().map(fix);
        fix(&mut self.output_dir);
        self.lid_estimate.input.as_mut().map(fix);
        self.rank_eval.predictions.as_mut().map(fix);
        if let Some(ProviderConfig::Files { manifest }) = &mut self.provider {
            fix(manifest);
        }
    }

    fn check_files(&self) -> Result<(), CliError> {
        let mut files: Vec<&PathBuf> = Vec::new();
        files.extend(&self.space);
        files.extend(&self.benchmark);
        files.extend(&self.lid_estimate.input);
        files.extend(&self.rank_eval.predictions);
        if let Some(ProviderConfig::Files { manifest }) = &self.provider {
            files.push(manifest);
        }
        match files.into_iter().find(|p| !p.is_file()) {
            Some(p) => Err(CliError::Data(format!("referenced file {} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    fn component_seed(&self, name: &str) -> u64 {
        seed::derive(self.seed, &[seed::tag(name)])
    }

    fn space(&self) -> Result<SpaceSpec, CliError> {
        Ok(match &self.space {
            Some(p) => SpaceSpec::load(p)?,
            None => SpaceSpec::nas_bench_201(),
        })
    }

    fn lid_config(&self) -> LidConfig {
        LidConfig {
            k: self.k,
            degenerate: if self.clamp_degenerate {
                DegeneratePolicy::Clamp(LID_MAX)
            } else {
                DegeneratePolicy::Error
            },
        }
    }

    fn split_config(&self) -> SplitConfig {
        SplitConfig { lid: self.lid_config(), measure: self.measure }
    }

    fn source(&self, spec: &SpaceSpec) -> Result<Arc<dyn ReprSource>, CliError> {
        match &self.provider {
            None => Err(CliError::Data("this subcommand needs a `provider` section".into())),
            Some(ProviderConfig::Synthetic { b, m, plan }) => Ok(Arc::new(repr::synthetic_source(
                spec,
                self.component_seed("provider"),
                *b,
                *m,
                plan,
            )?)),
            Some(ProviderConfig::Files { manifest }) => Ok(Arc::new(repr::file_source(manifest)?)),
        }
    }

    fn evo_config(&self) -> EvoConfig {
        let e = self.evo;
        EvoConfig {
            population_size: e.population_size,
            epochs: e.epochs,
            mutation_rate: e.mutation_rate,
            crossover_rate: e.crossover_rate,
            seed: self.component_seed("evo"),
            tournament_size: e.tournament_size,
            elitism: e.elitism,
        }
    }

    fn benchmark(&self, spec: &SpaceSpec) -> Result<TabularBenchmark, CliError> {
        let path = self
            .benchmark
            .as_ref()
            .ok_or_else(|| CliError::Data("this subcommand needs `benchmark`".into()))?;
        Ok(evo::load_benchmark(path, spec)?)
    }

    fn output(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.output_dir)?;
        Ok(self.output_dir.join(name))
    }

    fn partition_leaves(
        &self,
        spec: &SpaceSpec,
    ) -> Result<(Vec<SubSupernet>, Option<partition::PartitionTree>), CliError> {
        if self.rounds == 0 {
            return Ok((vec![spec.root()], None));
        }
        let tree = partition::run_partition(
            &spec.root(),
            self.rounds,
            &SharedSource(self.source(spec)?),
            &mut NoopHooks,
            &self.split_config(),
        )?;
        Ok((tree.leaves().into_iter().cloned().collect(), Some(tree)))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Timestamps live only here so the main outputs stay byte-reproducible.
fn write_meta(cfg: &RunConfig, subcommand: &str) -> Result<(), CliError> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        &cfg.output(&format!("{subcommand}.meta.json"))?,
        &json!({
            "subcommand": subcommand,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config_version": cfg.config_version,
            "seed": cfg.seed,
            "timestamp_unix": ts,
        }),
    )
}

fn cmd_lid_estimate(cfg: &RunConfig) -> Result<String, CliError> {
    let batch = match (&cfg.lid_estimate.input, &cfg.lid_estimate.synthetic) {
        (Some(p), _) => repr::load_tensor(p)?,
        (None, Some(s)) => lid::synth_manifold(s.d, s.ambient, s.n, cfg.component_seed("lid-estimate"))?,
        (None, None) => {
            return Err(CliError::Data("lid_estimate needs `input` or `synthetic`".into()));
        }
    };
    let r = lid::layer_lid_with(&batch, &cfg.lid_config())?;
    write_json(
        &cfg.output("lid_estimate.json")?,
        &json!({
            "k": cfg.k,
            "rows": batch.rows(),
            "cols": batch.cols(),
            "skipped": r.skipped,
            "lid": r.estimate.value(),
        }),
    )?;
    Ok(format!(
        "lid-estimate: LID = {:.4} over {} rows (k = {}, {} skipped)",
        r.estimate.value(),
        batch.rows(),
        cfg.k,
        r.skipped
    ))
}

fn cmd_split(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.space()?;
    let tree = partition::run_partition(
        &spec.root(),
        cfg.rounds,
        &SharedSource(cfg.source(&spec)?),
        &mut NoopHooks,
        &cfg.split_config(),
    )?;
    let report = tree.report(&spec);
    write_json(&cfg.output("partition_report.json")?, &report)?;
    Ok(format!(
        "split: {} rounds, {} leaves, {} nodes",
        cfg.rounds,
        report.leaves.len(),
        report.nodes.len()
    ))
}

fn cmd_separability(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.space()?;
    let source = cfg.source(&spec)?;
    let rows = partition::layer_separability(&spec.root(), source.as_ref(), &cfg.split_config())?;
    partition::write_separability_csv(cfg.output("separability.csv")?, &spec, &rows)?;
    let (best_layer, best) = rows
        .iter()
        .copied()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .expect("root has every layer unpartitioned");
    Ok(format!(
        "separability: {} layers, max D = {best:.6} at {}",
        rows.len(),
        spec.layer(best_layer).name
    ))
}

fn cmd_evo_search(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.space()?;
    let bench = cfg.benchmark(&spec)?;
    if let Some(gap) = bench.first_gap(&spec) {
        return Err(evo::EvoError::CoverageGap(gap.to_string()).into());
    }
    let (leaves, tree) = cfg.partition_leaves(&spec)?;
    let history = evo::evolve(&leaves, &bench, &cfg.evo_config())?;
    let (best, test_acc) = evo::best_architecture(&history, &bench)?;
    let best_val = history.best().expect("epochs >= 1").best_val;
    history.write_csv(cfg.output("history.csv")?)?;
    write_json(
        &cfg.output("best.json")?,
        &json!({
            "encoding": best.to_string(),
            "val_acc": best_val,
            "test_acc": test_acc,
            "leaves": leaves.iter().map(|l| l.id()).collect::<Vec<_>>(),
        }),
    )?;
    if let Some(tree) = tree {
        write_json(&cfg.output("partition_report.json")?, &tree.report(&spec))?;
    }
    Ok(format!(
        "evo-search: best {best} val {best_val} test {test_acc} after {} epochs over {} leaves",
        history.epochs.len(),
        leaves.len()
    ))
}

fn read_predictions(path: &Path, spec: &SpaceSpec) -> Result<Vec<(ArchEncoding, f64)>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["encoding", "score"] {
        return Err(CliError::Data(format!("{}: expected header encoding,score", path.display())));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let arch: ArchEncoding = row[0].parse()?;
        spec.validate_arch(&arch)?;
        let score: f64 = row[1]
            .parse()
            .map_err(|e| CliError::Data(format!("{}: bad score {:?}: {e}", path.display(), &row[1])))?;
        out.push((arch, score));
    }
    Ok(out)
}

fn cmd_rank_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.space()?;
    let bench = cfg.benchmark(&spec)?;
    let path = cfg
        .rank_eval
        .predictions
        .as_ref()
        .ok_or_else(|| CliError::Data("rank_eval.predictions is required".into()))?;
    let preds = read_predictions(path, &spec)?;
    let mut predicted = Vec::with_capacity(preds.len());
    let mut truth = Vec::with_capacity(preds.len());
    for (arch, score) in &preds {
        let rec = bench.get(arch).ok_or_else(|| evo::EvoError::CoverageGap(arch.to_string()))?;
        predicted.push(*score);
        truth.push(rec.test_acc);
    }
    let report = metrics::top_k_correlation(&predicted, &truth, cfg.rank_eval.top_k)?;
    write_json(&cfg.output("correlation.json")?, &report)?;
    Ok(format!(
        "rank-eval: kendall {:.4} spearman {:.4} over n = {}",
        report.kendall, report.spearman, report.n
    ))
}

fn cmd_emit_profiles(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.space()?;
    let source = cfg.source(&spec)?;
    let mut subs: Vec<(String, SubSupernet)> = Vec::new();
    if cfg.emit_profiles.include_supernet {
        subs.push(("supernet".into(), spec.root()));
    }
    for enc in &cfg.emit_profiles.archs {
        let arch: ArchEncoding = enc.parse()?;
        spec.validate_arch(&arch)?;
        let masks = arch
            .choices()
            .iter()
            .enumerate()
            .map(|(l, &op)| OpMask::singleton(spec.op_count(l), op))
            .collect();
        subs.push((enc.clone(), SubSupernet::new(masks)?));
    }
    let profiles = subs
        .into_iter()
        .map(|(name, sub)| {
            partition::sub_supernet_lid_profile(source.as_ref(), &sub, &cfg.lid_config()).map(|p| (name, p))
        })
        .collect::<Result<Vec<_>, _>>()?;
    metrics::emit_profile_csv(&profiles, cfg.output("profiles.csv")?)?;
    Ok(format!("emit-profiles: {} profiles of {} layers", profiles.len(), spec.num_layers()))
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called more than once in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    let (name, args): (&str, &CommonArgs) = match &cli.command {
        Command::LidEstimate(a) => ("lid-estimate", a),
        Command::Split(a) => ("split", a),
        Command::Separability(a) => ("separability", a),
        Command::EvoSearch(a) => ("evo-search", a),
        Command::RankEval(a) => ("rank-eval", a),
        Command::EmitProfiles(a) => ("emit-profiles", a),
    };
    let cfg = RunConfig::load(&args.config, &args.set)?;
    let summary = match &cli.command {
        Command::LidEstimate(_) => cmd_lid_estimate(&cfg),
        Command::Split(_) => cmd_split(&cfg),
        Command::Separability(_) => cmd_separability(&cfg),
        Command::EvoSearch(_) => cmd_evo_search(&cfg),
        Command::RankEval(_) => cmd_rank_eval(&cfg),
        Command::EmitProfiles(_) => cmd_emit_profiles(&cfg),
    }?;
    write_meta(&cfg, name)?;
    Ok(summary)
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Data(msg)) = &e;
            eprintln!("lidpart: {msg}");
            e.code()
        }
    }
}
