//! Command-line surface: argument types, the individual commands and the
//! seeded end-to-end pipeline.
//!
//! Every command writes a `manifest.json` describing its full argument set
//! before producing results; wall-clock timings go to a separate
//! `timings.json` so that manifests and outputs replay byte for byte.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{graph_export, summarize, write_edges, PairSummary};
use crate::draws::{self, DrawFormat, ModelKind, StoredDraws};
use crate::error::{MillsError, Result};
use crate::gibbs::{run_chain, Hyperparams, SamplerConfig};
use crate::lca::fit_latent_class;
use crate::metrics::eval_metrics;
use crate::scenario::{generate, ScenarioSpec};
use crate::table::{load_dataset, load_schema, marginal_counts, CategoricalDataset, PairIndex};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "MILLS_OUT_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "mills",
    version,
    about = "Mixtures of composite bivariate log-linear models"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a dataset from one of the simulation scenarios.
    Simulate(SimulateArgs),
    /// Fit the mixture of composite log-linear models.
    Fit(FitArgs),
    /// Fit the latent class baseline.
    FitLca(FitLcaArgs),
    /// Posterior summaries of bivariate tables and Cramér-V.
    Summarize(SummarizeArgs),
    /// Evaluate fitted draws against true pairwise tables.
    Compare(CompareArgs),
    /// simulate, fit both models, summarize and compare in one seeded run.
    Pipeline(PipelineArgs),
    /// Run the command recorded in a manifest again.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub scenario: u8,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 15)]
    pub p: usize,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Data CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for the exact generating tables and true pairwise margins.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Scenario 4: let block J' include the last variable of J and overwrite it.
    #[arg(long)]
    pub literal_overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON object mapping column names to a level count or a label list.
    #[arg(long)]
    pub levels: Option<PathBuf>,
    #[arg(long = "H", default_value_t = 5)]
    pub components: usize,
    #[arg(long, default_value_t = 3.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 10.0)]
    pub a0: f64,
    #[arg(long, default_value_t = 10.0)]
    pub a1: f64,
    /// Hold all composite weights at this value instead of sampling them.
    #[arg(long)]
    #[serde(default)]
    pub fixed_weight: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    #[arg(long, value_enum, default_value_t = DrawFormat::Csv)]
    pub format: DrawFormat,
    /// Store the allocations of every kept iteration.
    #[arg(long)]
    pub store_z: bool,
    /// Update (component, pair) blocks sequentially.
    #[arg(long)]
    pub serial: bool,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitLcaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub levels: Option<PathBuf>,
    #[arg(long = "H", default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    #[arg(long, value_enum, default_value_t = DrawFormat::Csv)]
    pub format: DrawFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SummarizeArgs {
    /// Draw directory written by `fit` or `fit-lca`.
    #[arg(long)]
    pub draws: PathBuf,
    /// `all` or a list such as `1-2,3-5`.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Data CSV whose empirical bivariate tables serve as reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Node metadata CSV copied next to the edge list.
    #[arg(long)]
    pub nodes: Option<PathBuf>,
    /// Run directory; defaults to the parent of the draw directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Directory written by `simulate --truth`.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub draws: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = 3)]
    pub scenario: u8,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "H", default_value_t = 5)]
    pub components: usize,
    #[arg(long = "lca-H", default_value_t = 10)]
    pub lca_classes: usize,
    #[arg(long, default_value_t = 3.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 10.0)]
    pub a0: f64,
    #[arg(long, default_value_t = 10.0)]
    pub a1: f64,
    /// Hold all composite weights at this value instead of sampling them.
    #[arg(long)]
    #[serde(default)]
    pub fixed_weight: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    #[arg(long, value_enum, default_value_t = DrawFormat::Csv)]
    pub format: DrawFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this location instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
    pub timings: String,
}

/// Output root: `$MILLS_OUT_ROOT` or `runs`.
pub fn out_root() -> PathBuf {
    env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Exit status for an error.
pub fn exit_code(err: &MillsError) -> i32 {
    if err.is_input_error() {
        EXIT_INPUT
    } else if err.is_numerical_error() {
        EXIT_NUMERICAL
    } else if matches!(err, MillsError::Io { .. }) {
        EXIT_IO
    } else {
        1
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MillsError::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| MillsError::io(path, e))
}

fn write_manifest(path: &Path, command: &Command) -> Result<()> {
    write_json(
        path,
        &Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.clone(),
            timings: TIMINGS_FILE.to_string(),
        },
    )
}

fn write_timings(path: &Path, timings: &BTreeMap<String, f64>) -> Result<()> {
    write_json(path, timings)
}

fn load_data(path: &Path, levels: Option<&Path>) -> Result<CategoricalDataset> {
    let schema = levels.map(load_schema).transpose()?;
    load_dataset(path, schema.as_ref())
}

/// Parse `all` or a comma list of `j-k` / `j:k` pairs (1-based).
pub fn parse_pairs(spec: &str, p: usize) -> Result<Option<Vec<PairIndex>>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    spec.split(',')
        .map(|item| {
            let bad = || MillsError::InvalidInput(format!("bad pair {item:?}; expected j-k"));
            let (a, b) = item.trim().split_once(['-', ':']).ok_or_else(bad)?;
            let j: usize = a.trim().parse().map_err(|_| bad())?;
            let k: usize = b.trim().parse().map_err(|_| bad())?;
            if j == 0 || k == 0 || j.max(k) > p || j == k {
                return Err(bad());
            }
            PairIndex::new(j.min(k) - 1, j.max(k) - 1)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn simulate(args: &SimulateArgs) -> Result<PathBuf> {
    let out = args.out.clone().unwrap_or_else(|| {
        out_root().join(format!("scenario{}-seed{}.csv", args.scenario, args.seed))
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.json");
    let mut recorded = args.clone();
    recorded.out = Some(out.clone());
    write_manifest(Path::new(&manifest), &Command::Simulate(recorded))?;

    let mut spec = ScenarioSpec::new(args.scenario, args.n, args.p, args.d, args.seed);
    if args.literal_overlap {
        spec = spec.with_literal_overlap();
    }
    let scenario = generate(&spec)?;
    scenario.data.write_csv(&out)?;
    if let Some(dir) = &args.truth {
        create_dir(dir)?;
        write_json(&dir.join("truth.json"), &scenario.truth)?;
        let levels: BTreeMap<&str, usize> = scenario
            .data
            .names()
            .iter()
            .map(String::as_str)
            .zip(scenario.data.levels().iter().copied())
            .collect();
        write_json(&dir.join("levels.json"), &levels)?;
        let mut w = csv::Writer::from_path(dir.join("margins.csv"))?;
        w.write_record(["node_j", "node_k", "a", "b", "prob"])?;
        for (pair, table) in scenario.truth.pair_margins()? {
            let d2 = scenario.truth.levels[pair.k];
            for (c, v) in table.iter().enumerate() {
                w.write_record([
                    (pair.j + 1).to_string(),
                    (pair.k + 1).to_string(),
                    (c / d2 + 1).to_string(),
                    (c % d2 + 1).to_string(),
                    draws::format_value(*v),
                ])?;
            }
        }
        w.flush().map_err(|e| MillsError::io(dir, e))?;
    }
    info!(
        "wrote {} observations to {}",
        scenario.data.n(),
        out.display()
    );
    Ok(out)
}

fn chain_configs(
    iters: usize,
    burnin: usize,
    thin: usize,
    seed: u64,
    chains: usize,
    parallel: bool,
    store_z: bool,
) -> Result<Vec<SamplerConfig>> {
    if chains < 1 {
        return Err(MillsError::InvalidParameter(
            "--chains must be at least 1".into(),
        ));
    }
    let configs: Vec<SamplerConfig> = (0..chains as u64)
        .map(|chain| SamplerConfig {
            iterations: iters,
            burn_in: burnin,
            thin,
            seed,
            chain,
            parallel,
            store_allocations: store_z,
        })
        .collect();
    configs[0].validate()?;
    Ok(configs)
}

fn run_dir(out: &Option<PathBuf>, default: String) -> PathBuf {
    out.clone().unwrap_or_else(|| out_root().join(default))
}

pub fn fit(args: &FitArgs) -> Result<PathBuf> {
    let out = run_dir(&args.out, format!("fit-seed{}", args.seed));
    create_dir(&out)?;
    let mut recorded = args.clone();
    recorded.out = Some(out.clone());
    write_manifest(&out.join(MANIFEST_FILE), &Command::Fit(recorded))?;

    let started = Instant::now();
    let data = load_data(&args.data, args.levels.as_deref())?;
    let hyper = Hyperparams {
        components: args.components,
        sigma2: args.sigma2,
        mu: None,
        a0: args.a0,
        a1: args.a1,
        fixed_weight: args.fixed_weight,
    };
    let configs = chain_configs(
        args.iters,
        args.burnin,
        args.thin,
        args.seed,
        args.chains,
        !args.serial,
        args.store_z,
    )?;
    let chains = configs
        .par_iter()
        .map(|cfg| run_chain(&data, &hyper, cfg))
        .collect::<Result<Vec<_>>>()?;
    draws::write_mills(&out.join("draws"), &chains, args.format)?;

    let mut timings = BTreeMap::new();
    for c in &chains {
        timings.insert(format!("chain-{}", c.config.chain + 1), c.wall_seconds);
        let diag = &c.diagnostics;
        if diag.rate_cap_hits > 0 {
            warn!(
                "chain {}: gamma rate cap hit {} times",
                c.config.chain + 1,
                diag.rate_cap_hits
            );
        }
        if diag.boundedness_violations > 0 {
            return Err(MillsError::Invariant(format!(
                "chain {}: {} kept iterations broke the likelihood bounds (max pair loglik {}, max composite log-density {}, min weight {})",
                c.config.chain + 1,
                diag.boundedness_violations,
                diag.max_pair_loglik,
                diag.max_obs_log_density,
                diag.min_weight
            )));
        }
    }
    timings.insert("total".into(), started.elapsed().as_secs_f64());
    write_timings(&out.join(TIMINGS_FILE), &timings)?;
    Ok(out)
}

pub fn fit_lca(args: &FitLcaArgs) -> Result<PathBuf> {
    let out = run_dir(&args.out, format!("fit-lca-seed{}", args.seed));
    create_dir(&out)?;
    let mut recorded = args.clone();
    recorded.out = Some(out.clone());
    write_manifest(&out.join(MANIFEST_FILE), &Command::FitLca(recorded))?;

    let started = Instant::now();
    let data = load_data(&args.data, args.levels.as_deref())?;
    let configs = chain_configs(
        args.iters,
        args.burnin,
        args.thin,
        args.seed,
        args.chains,
        true,
        false,
    )?;
    let chains = configs
        .par_iter()
        .map(|cfg| fit_latent_class(&data, args.classes, cfg))
        .collect::<Result<Vec<_>>>()?;
    draws::write_lca(&out.join("draws"), &chains, args.format)?;
    let mut timings: BTreeMap<String, f64> = chains
        .iter()
        .map(|c| (format!("chain-{}", c.config.chain + 1), c.wall_seconds))
        .collect();
    timings.insert("total".into(), started.elapsed().as_secs_f64());
    write_timings(&out.join(TIMINGS_FILE), &timings)?;
    Ok(out)
}

fn write_pair_summaries(dir: &Path, summaries: &[PairSummary]) -> Result<()> {
    let mut assoc = csv::Writer::from_path(dir.join("cramer_v.csv"))?;
    assoc.write_record(["node_j", "node_k", "mean_V", "q025_V", "q975_V"])?;
    for s in summaries {
        let (j, k) = (s.table.pair.j + 1, s.table.pair.k + 1);
        let path = dir.join(format!("pair_{j}_{k}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["a", "b", "mean", "q025", "q975"])?;
        for c in 0..s.table.d1 * s.table.d2 {
            w.write_record([
                (c / s.table.d2 + 1).to_string(),
                (c % s.table.d2 + 1).to_string(),
                draws::format_value(s.table.mean[c]),
                draws::format_value(s.table.q025[c]),
                draws::format_value(s.table.q975[c]),
            ])?;
        }
        w.flush().map_err(|e| MillsError::io(&path, e))?;
        let iv = s.association.interval;
        assoc.write_record([
            j.to_string(),
            k.to_string(),
            draws::format_value(iv.mean),
            draws::format_value(iv.q025),
            draws::format_value(iv.q975),
        ])?;
    }
    assoc.flush().map_err(|e| MillsError::io(dir, e))?;
    Ok(())
}

/// The three summary tables of a pair, each on the simplex.
fn summary_tables(s: &PairSummary) -> [(&'static str, Vec<f64>); 3] {
    let normalise = |t: &[f64]| {
        let total: f64 = t.iter().sum();
        t.iter().map(|v| v / total).collect::<Vec<f64>>()
    };
    [
        ("mean", s.table.mean.clone()),
        ("q025", normalise(&s.table.q025)),
        ("q975", normalise(&s.table.q975)),
    ]
}

const METRIC_HEADER: [&str; 8] = [
    "method",
    "run",
    "node_j",
    "node_k",
    "summary",
    "kl",
    "wasserstein",
    "pearson",
];

fn metric_rows(
    method: &str,
    run: &str,
    summaries: &[PairSummary],
    reference: impl Fn(PairIndex) -> Result<Vec<f64>>,
    n: usize,
) -> Result<Vec<[String; 8]>> {
    let mut rows = Vec::new();
    for s in summaries {
        let truth = reference(s.table.pair)?;
        for (label, table) in summary_tables(s) {
            let m = eval_metrics(&table, &truth, s.table.d1, s.table.d2, n)?;
            rows.push([
                method.to_string(),
                run.to_string(),
                (s.table.pair.j + 1).to_string(),
                (s.table.pair.k + 1).to_string(),
                label.to_string(),
                draws::format_value(m.kl),
                draws::format_value(m.wasserstein),
                draws::format_value(m.pearson),
            ]);
        }
    }
    Ok(rows)
}

fn write_metric_rows(path: &Path, rows: &[[String; 8]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_HEADER)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| MillsError::io(path, e))?;
    Ok(())
}

fn method_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Mills => "mills",
        ModelKind::Lca => "lca",
    }
}

fn run_label(dir: &Path) -> String {
    let base = if dir.file_name().is_some_and(|n| n == "draws") {
        dir.parent().unwrap_or(dir)
    } else {
        dir
    };
    base.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn summarize_cmd(args: &SummarizeArgs) -> Result<PathBuf> {
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .draws
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| out_root().join("summary")),
    };
    create_dir(&out)?;
    let mut recorded = args.clone();
    recorded.out = Some(out.clone());
    let manifest = if out.join(MANIFEST_FILE).exists() {
        "summarize.manifest.json"
    } else {
        MANIFEST_FILE
    };
    write_manifest(&out.join(manifest), &Command::Summarize(recorded))?;

    let started = Instant::now();
    let stored = StoredDraws::load(&args.draws)?;
    let pairs = parse_pairs(&args.pairs, stored.meta.levels.len())?;
    let summaries = summarize(&stored, pairs.as_deref())?;
    let dir = out.join("summaries");
    create_dir(&dir)?;
    write_pair_summaries(&dir, &summaries)?;
    write_edges(
        &dir.join("edges.csv"),
        &graph_export(&summaries, args.threshold),
    )?;
    let nodes_path = dir.join("nodes.csv");
    match &args.nodes {
        Some(src) => {
            fs::copy(src, &nodes_path).map_err(|e| MillsError::io(src, e))?;
        }
        None => {
            let mut w = csv::Writer::from_path(&nodes_path)?;
            w.write_record(["node", "name", "levels"])?;
            for (j, (name, d)) in stored
                .meta
                .names
                .iter()
                .zip(&stored.meta.levels)
                .enumerate()
            {
                w.write_record([(j + 1).to_string(), name.clone(), d.to_string()])?;
            }
            w.flush().map_err(|e| MillsError::io(&nodes_path, e))?;
        }
    }

    if let Some(reference) = &args.reference {
        let data = load_dataset(reference, None)?;
        if data.p() != stored.meta.levels.len() {
            return Err(MillsError::Dimension {
                expected: stored.meta.levels.len(),
                got: data.p(),
            });
        }
        let empirical = |pair: PairIndex| -> Result<Vec<f64>> {
            let stats = marginal_counts(&data, pair, None)?;
            let (d1, d2) = (stored.meta.levels[pair.j], stored.meta.levels[pair.k]);
            if stats.d1 > d1 || stats.d2 > d2 {
                return Err(MillsError::InvalidInput(format!(
                    "reference codes exceed the fitted levels for pair {pair}"
                )));
            }
            let mut table = vec![0.0; d1 * d2];
            for a in 0..stats.d1 {
                for b in 0..stats.d2 {
                    table[a * d2 + b] = stats.counts[a * stats.d2 + b] as f64 / data.n() as f64;
                }
            }
            Ok(table)
        };
        let rows = metric_rows(
            method_name(stored.meta.model),
            &run_label(&args.draws),
            &summaries,
            empirical,
            data.n(),
        )?;
        write_metric_rows(&out.join("metrics.csv"), &rows)?;
    }
    let mut timings = BTreeMap::new();
    timings.insert("summarize".to_string(), started.elapsed().as_secs_f64());
    write_timings(&out.join("summarize.timings.json"), &timings)?;
    Ok(out)
}

/// Truth written by `simulate --truth`.
pub fn load_truth(dir: &Path) -> Result<crate::scenario::ScenarioTruth> {
    let path = dir.join("truth.json");
    let text = fs::read_to_string(&path).map_err(|e| MillsError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MillsError::data(&path, e.to_string()))
}

pub fn compare(args: &CompareArgs) -> Result<PathBuf> {
    let out = run_dir(&args.out, "compare".into());
    create_dir(&out)?;
    let mut recorded = args.clone();
    recorded.out = Some(out.clone());
    let manifest = if out.join(MANIFEST_FILE).exists() {
        "compare.manifest.json"
    } else {
        MANIFEST_FILE
    };
    write_manifest(&out.join(manifest), &Command::Compare(recorded))?;

    let truth = load_truth(&args.truth)?;
    let mut rows = Vec::new();
    for dir in &args.draws {
        let stored = StoredDraws::load(dir)?;
        if stored.meta.levels != truth.levels {
            return Err(MillsError::InvalidInput(format!(
                "{}: levels {:?} do not match the truth {:?}",
                dir.display(),
                stored.meta.levels,
                truth.levels
            )));
        }
        let summaries = summarize(&stored, None)?;
        rows.extend(metric_rows(
            method_name(stored.meta.model),
            &run_label(dir),
            &summaries,
            |pair| truth.pair_margin(pair),
            stored.meta.n,
        )?);
    }
    write_metric_rows(&out.join("metrics.csv"), &rows)?;

    let mut w = csv::Writer::from_path(out.join("boxplot.csv"))?;
    w.write_record(["method", "run", "summary", "metric", "value"])?;
    for r in &rows {
        for (metric, value) in ["kl", "wasserstein", "pearson"].iter().zip(&r[5..]) {
            w.write_record([&r[0], &r[1], &r[4], &metric.to_string(), value])?;
        }
    }
    w.flush().map_err(|e| MillsError::io(&out, e))?;
    Ok(out)
}

/// Outcome of [`pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub out: PathBuf,
    pub data: PathBuf,
    pub truth: PathBuf,
    pub mills: PathBuf,
    pub lca: PathBuf,
    pub compare: PathBuf,
}

/// simulate -> fit -> fit-lca -> summarize -> compare under one seed.
pub fn pipeline(args: &PipelineArgs) -> Result<PipelineReport> {
    let out = run_dir(
        &args.out,
        format!("pipeline-s{}-seed{}", args.scenario, args.seed),
    );
    create_dir(&out)?;
    let mut recorded = args.clone();
    recorded.out = Some(out.clone());
    write_manifest(&out.join(MANIFEST_FILE), &Command::Pipeline(recorded))?;
    let started = Instant::now();
    let step = |name: &'static str| {
        move |e: MillsError| {
            log::error!("pipeline step {name} failed");
            e
        }
    };

    let truth = out.join("truth");
    let data = simulate(&SimulateArgs {
        scenario: args.scenario,
        n: args.n,
        p: args.p,
        d: args.d,
        seed: args.seed,
        out: Some(out.join("data.csv")),
        truth: Some(truth.clone()),
        literal_overlap: false,
    })
    .map_err(step("simulate"))?;
    let levels = Some(truth.join("levels.json"));
    let mills = fit(&FitArgs {
        data: data.clone(),
        levels: levels.clone(),
        components: args.components,
        sigma2: args.sigma2,
        a0: args.a0,
        a1: args.a1,
        fixed_weight: args.fixed_weight,
        iters: args.iters,
        burnin: args.burnin,
        thin: 1,
        seed: args.seed,
        chains: args.chains,
        format: args.format,
        store_z: false,
        serial: false,
        out: Some(out.join("mills")),
    })
    .map_err(step("fit"))?;
    let lca = fit_lca(&FitLcaArgs {
        data: data.clone(),
        levels,
        classes: args.lca_classes,
        iters: args.iters,
        burnin: args.burnin,
        thin: 1,
        seed: args.seed,
        chains: args.chains,
        format: args.format,
        out: Some(out.join("lca")),
    })
    .map_err(step("fit-lca"))?;
    for run in [&mills, &lca] {
        summarize_cmd(&SummarizeArgs {
            draws: run.join("draws"),
            pairs: "all".into(),
            threshold: 0.0,
            reference: Some(data.clone()),
            nodes: None,
            out: Some(run.clone()),
        })
        .map_err(step("summarize"))?;
    }
    let compare_dir = compare(&CompareArgs {
        truth: truth.clone(),
        draws: vec![mills.join("draws"), lca.join("draws")],
        out: Some(out.join("compare")),
    })
    .map_err(step("compare"))?;
    let mut timings = BTreeMap::new();
    timings.insert("total".to_string(), started.elapsed().as_secs_f64());
    write_timings(&out.join(TIMINGS_FILE), &timings)?;
    Ok(PipelineReport {
        out,
        data,
        truth,
        mills,
        lca,
        compare: compare_dir,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| MillsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MillsError::data(path, format!("bad manifest: {e}")))
}

fn with_out(command: Command, out: Option<PathBuf>) -> Command {
    let Some(out) = out else { return command };
    match command {
        Command::Simulate(a) => Command::Simulate(SimulateArgs {
            out: Some(out),
            ..a
        }),
        Command::Fit(a) => Command::Fit(FitArgs {
            out: Some(out),
            ..a
        }),
        Command::FitLca(a) => Command::FitLca(FitLcaArgs {
            out: Some(out),
            ..a
        }),
        Command::Summarize(a) => Command::Summarize(SummarizeArgs {
            out: Some(out),
            ..a
        }),
        Command::Compare(a) => Command::Compare(CompareArgs {
            out: Some(out),
            ..a
        }),
        Command::Pipeline(a) => Command::Pipeline(PipelineArgs {
            out: Some(out),
            ..a
        }),
        Command::Rerun(a) => Command::Rerun(a),
    }
}

/// Dispatch a parsed command; returns the main output location.
pub fn run(command: &Command) -> Result<PathBuf> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::FitLca(a) => fit_lca(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Pipeline(a) => pipeline(a).map(|r| r.out),
        Command::Rerun(a) => {
            let manifest = load_manifest(&a.manifest)?;
            if matches!(manifest.command, Command::Rerun(_)) {
                return Err(MillsError::InvalidInput(
                    "a manifest cannot record a rerun".into(),
                ));
            }
            run(&with_out(manifest.command, a.out.clone()))
        }
    }
}
