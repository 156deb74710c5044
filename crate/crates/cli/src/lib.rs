//! Batch runner behind the `decoymix` binary.
//!
//! Three subcommands:
//!
//! * `run` simulates a scenario for every (sweep point, seed) pair, attacks
//!   each observation log and writes per-run artefacts plus one summary.
//! * `gen-grid` writes a grid road graph and a matching scenario file.
//! * `attack` replays the external adversary over an exported observation
//!   log.
//!
//! Exit codes: 0 on success, 2 for anything wrong with the inputs, 3 when an
//! output cannot be written or would be overwritten without `--force`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use decoymix::adversary::{attack, build_tracks, ZoneLinks};
use decoymix::export::{read_observations, read_truth, write_events, write_observations, write_truth};
use decoymix::metrics::{evaluate, score, success_rate, MetricsError, RunReport};
use decoymix::road::{
    central_zone_sites, generate_grid, traverse_time_bounds, MixZoneGeometry, RoadGraph, DEFAULT_V_MIN_MPS,
    URBAN_SPEED_LIMIT_MPS,
};
use decoymix::scenario::{ConfigError, GraphSource, MobilitySource, Scenario, ScenarioConfig, SiteConfig};
use decoymix::sim::run as simulate;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Exists(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "decoymix", version, about = "Mix-zone decoy traffic simulator and linking adversary")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate and attack a scenario over seeds and sweep points.
    Run(RunArgs),
    /// Write a grid road graph and a scenario with central zones.
    GenGrid(GenGridArgs),
    /// Run the external adversary over an exported observation log.
    Attack(AttackArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// `a..b` (inclusive), a comma list, or one seed.
    #[arg(long, default_value = "1")]
    pub seeds: String,
    /// `key=v1,v2,...` over a numeric scenario field; repeat for a product.
    #[arg(long)]
    pub sweep: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GenGridArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value_t = 500.0)]
    pub spacing_m: f64,
    #[arg(long, default_value_t = 2)]
    pub zones: usize,
    #[arg(long, default_value_t = 100.0)]
    pub zone_radius_m: f64,
    #[arg(long, default_value_t = 200)]
    pub vehicles: usize,
    #[arg(long, default_value_t = 0.1)]
    pub arrival_rate_per_s: f64,
    #[arg(long, default_value_t = 7)]
    pub mobility_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Observation CSV as written by `run`.
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// JSON list of `{"x_m": .., "y_m": ..}` zone centers.
    #[arg(long)]
    pub zones: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    pub zone_radius_m: f64,
    #[arg(long, default_value_t = DEFAULT_V_MIN_MPS)]
    pub v_min_mps: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma_v_s: f64,
    #[arg(long)]
    pub allow_u_turns: bool,
    /// Ground truth JSON; adds the success rate to the output.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

pub fn main_with(cli: Cli) -> ExitCode {
    let res = match cli.command {
        Command::Run(a) => RunManifest::from_args(&a).and_then(|m| cmd_run(&m)).map(|s| {
            println!("{} runs, summary at {}", s.runs, s.summary.display());
        }),
        Command::GenGrid(a) => cmd_gen_grid(&a).map(|g| {
            println!("{} junctions, {} zones, {} eavesdroppers in {}", g.junctions, g.zones, g.eavesdroppers, a.out.display());
        }),
        Command::Attack(a) => cmd_attack(&a).map(|r| println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"))),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("decoymix: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_owned(), source })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

/// Parses `3`, `1,4,9` or the inclusive range `1..5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("bad seed list `{s}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().map_err(|_| bad())?, b.trim().parse::<u64>().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep(s: &str) -> Result<(String, Vec<String>), CliError> {
    let (k, vs) = s.split_once('=').ok_or_else(|| CliError::Config(format!("sweep `{s}` is not key=v1,v2,...")))?;
    let vals: Vec<String> = vs.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
    if k.trim().is_empty() || vals.is_empty() {
        return Err(CliError::Config(format!("sweep `{s}` has no values")));
    }
    Ok((k.trim().to_owned(), vals))
}

/// One fully resolved batch: a base scenario, the seeds, and a finite grid
/// of overrides.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub seeds: Vec<u64>,
    pub sweeps: Vec<(String, Vec<String>)>,
    pub out: PathBuf,
    pub force: bool,
    pub workers: usize,
    pub format: Format,
}

impl RunManifest {
    pub fn from_args(a: &RunArgs) -> Result<Self, CliError> {
        let sweeps = a.sweep.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>, _>>()?;
        for (i, (k, _)) in sweeps.iter().enumerate() {
            if k == "rng_seed" {
                return Err(CliError::Config("rng_seed is set by --seeds, not --sweep".into()));
            }
            if sweeps[..i].iter().any(|(j, _)| j == k) {
                return Err(CliError::Config(format!("`{k}` swept twice")));
            }
        }
        Ok(RunManifest {
            scenario: a.scenario.clone(),
            seeds: parse_seeds(&a.seeds)?,
            sweeps,
            out: a.out.clone(),
            force: a.force,
            workers: a.workers,
            format: a.format,
        })
    }

    /// Every sweep point as (key, value) pairs, first axis outermost.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        let mut pts = vec![Vec::new()];
        for (k, vs) in &self.sweeps {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    vs.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((k.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        pts
    }
}

pub fn point_label(point: &[(String, String)]) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("__")
}

/// Headline numbers of one run, as aggregated in the summary.
const SUMMARY_METRICS: [&str; 8] = [
    "success_rate",
    "transitions",
    "mean_tracked_km",
    "rsu_kb_per_s",
    "rsu_ms_per_s",
    "vehicle_kb_per_s",
    "vehicle_ms_per_s",
    "mean_filter_latency_s",
];

fn headline(r: &RunReport) -> [Option<f64>; 8] {
    let o = &r.overhead;
    [
        r.linkability.success_rate,
        Some(r.linkability.transitions as f64),
        r.linkability.mean_tracked_km,
        Some(o.rsu_kb_per_s),
        Some(o.rsu_ms_per_s),
        Some(o.vehicle_kb_per_s),
        Some(o.vehicle_ms_per_s),
        o.mean_filter_latency_s,
    ]
}

/// Mean and sample standard deviation; the deviation is absent below two
/// samples.
pub fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (n >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    (Some(mean), sd)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<(String, MetricSummary)>,
}

impl PointSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, m)| m)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub runs: usize,
    pub summary: PathBuf,
    pub points: Vec<PointSummary>,
}

fn check_fresh(path: &Path, force: bool) -> Result<(), CliError> {
    let occupied = match fs::read_dir(path) {
        Ok(mut d) => d.next().is_some(),
        Err(_) => path.exists(),
    };
    if occupied && !force {
        return Err(CliError::Exists(path.to_owned()));
    }
    Ok(())
}

pub fn cmd_run(m: &RunManifest) -> Result<RunSummary, CliError> {
    let text = read(&m.scenario)?;
    let base = ScenarioConfig::from_json(&text)?;
    let base_dir = m.scenario.parent().unwrap_or(Path::new(".")).to_owned();
    let points = m.points();
    // Resolve every config before touching the output directory so a bad
    // sweep value fails as a config error with nothing written.
    let mut jobs = Vec::new();
    for p in &points {
        let mut c = base.clone();
        for (k, v) in p {
            c = c.with_override(k, v)?;
        }
        for &seed in &m.seeds {
            let mut c = c.clone();
            c.rng_seed = seed;
            jobs.push((point_label(p), seed, c));
        }
    }
    check_fresh(&m.out, m.force)?;

    let exec = |jobs: &[(String, u64, ScenarioConfig)]| -> Vec<Result<RunReport, CliError>> {
        jobs.par_iter()
            .map(|(label, seed, c)| {
                let sc = Scenario::build(c.clone(), &base_dir)?;
                let out = simulate(&sc)?;
                let report = evaluate(&sc, &out)?;
                let dir = m.out.join(label).join(format!("seed_{seed}"));
                write(&dir.join("observations.csv"), &write_observations(&out.observations))?;
                write(&dir.join("events.jsonl"), &write_events(&out.events))?;
                write(&dir.join("truth.json"), &write_truth(&out.truth))?;
                write(&dir.join("report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
                Ok(report)
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(m.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let reports = pool.install(|| exec(&jobs)).into_iter().collect::<Result<Vec<_>, _>>()?;

    let per_point = m.seeds.len();
    let summaries: Vec<PointSummary> = points
        .iter()
        .zip(reports.chunks(per_point))
        .map(|(p, rs)| {
            let heads: Vec<[Option<f64>; 8]> = rs.iter().map(headline).collect();
            let metrics = SUMMARY_METRICS
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let xs: Vec<f64> = heads.iter().filter_map(|h| h[i]).collect();
                    let (mean, sd) = mean_sd(&xs);
                    (name.to_string(), MetricSummary { n: xs.len(), mean, sd })
                })
                .collect();
            PointSummary {
                label: point_label(p),
                overrides: p.clone(),
                seeds: m.seeds.clone(),
                metrics,
            }
        })
        .collect();

    let summary = match m.format {
        Format::Csv => {
            let path = m.out.join("summary.csv");
            write(&path, &summary_csv(&m.sweeps, &summaries))?;
            path
        }
        Format::Json => {
            let path = m.out.join("summary.json");
            write(&path, &serde_json::to_string_pretty(&summaries).expect("summary serializes"))?;
            path
        }
    };
    Ok(RunSummary {
        runs: jobs.len(),
        summary,
        points: summaries,
    })
}

fn summary_csv(sweeps: &[(String, Vec<String>)], points: &[PointSummary]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("label");
    for (k, _) in sweeps {
        write!(s, ",{k}").unwrap();
    }
    s.push_str(",seeds");
    for m in SUMMARY_METRICS {
        write!(s, ",{m}_n,{m}_mean,{m}_sd").unwrap();
    }
    s.push('\n');
    for p in points {
        s.push_str(&p.label);
        for (_, v) in &p.overrides {
            write!(s, ",{v}").unwrap();
        }
        write!(s, ",{}", p.seeds.len()).unwrap();
        for (_, m) in &p.metrics {
            write!(s, ",{},{},{}", m.n, cell(m.mean), cell(m.sd)).unwrap();
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSummary {
    pub junctions: usize,
    pub zones: usize,
    pub eavesdroppers: usize,
}

pub fn cmd_gen_grid(a: &GenGridArgs) -> Result<GridSummary, CliError> {
    let g = generate_grid(a.rows, a.cols, a.spacing_m, URBAN_SPEED_LIMIT_MPS).map_err(|e| CliError::Config(e.to_string()))?;
    let sites =
        central_zone_sites(a.rows, a.cols, a.spacing_m, a.zones, a.zone_radius_m).map_err(|e| CliError::Config(e.to_string()))?;
    let mut c = ScenarioConfig::new(
        GraphSource::File("graph.json".into()),
        MobilitySource::Synthetic {
            n_vehicles: a.vehicles,
            arrival_rate_per_s: a.arrival_rate_per_s,
            seed: a.mobility_seed,
        },
        sites.clone(),
    );
    c.zone_radius_m = a.zone_radius_m;
    c.eavesdroppers = sites
        .iter()
        .map(|&p| SiteConfig {
            range_m: Some(c.eavesdropper_range_m),
            ..SiteConfig::at(p)
        })
        .collect();
    c.validate()?;
    let (graph_path, scenario_path) = (a.out.join("graph.json"), a.out.join("scenario.json"));
    for p in [&graph_path, &scenario_path] {
        check_fresh(p, a.force)?;
    }
    write(&graph_path, &g.to_json())?;
    write(&scenario_path, &c.to_json())?;
    Ok(GridSummary {
        junctions: g.junctions.len(),
        zones: c.zones.len(),
        eavesdroppers: c.eavesdroppers.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub candidate_sets: usize,
    pub links: Vec<ZoneLinks>,
    /// Present when ground truth was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transitions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn cmd_attack(a: &AttackArgs) -> Result<AttackReport, CliError> {
    let cfg = |e: &dyn std::fmt::Display, p: &Path| CliError::Config(format!("{}: {e}", p.display()));
    let obs = read_observations(&read(&a.obs)?).map_err(|e| cfg(&e, &a.obs))?;
    let g = RoadGraph::from_json(&read(&a.graph)?).map_err(|e| cfg(&e, &a.graph))?;
    let sites: Vec<SiteConfig> = serde_json::from_str(&read(&a.zones)?).map_err(|e| cfg(&e, &a.zones))?;
    if !(a.gamma_v_s > 0.0) || !(a.v_min_mps > 0.0) {
        return Err(CliError::Config("gamma_v_s and v_min_mps must be positive".into()));
    }
    let zones = sites
        .iter()
        .map(|s| MixZoneGeometry::from_graph(&g, s.point(), a.zone_radius_m, a.allow_u_turns))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| cfg(&e, &a.zones))?;
    let bounds = zones
        .iter()
        .map(|z| traverse_time_bounds(z, &g, a.v_min_mps))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| cfg(&e, &a.zones))?;
    let links = attack(&build_tracks(&obs, a.gamma_v_s), &g, &zones, &bounds, a.gamma_v_s);
    let candidate_sets = links.iter().map(|l| l.sets.len()).sum();
    let mut report = AttackReport {
        candidate_sets,
        links,
        transitions: None,
        success_rate: None,
        error: None,
    };
    match &a.truth {
        Some(p) => {
            let truth = read_truth(&read(p)?).map_err(|e| cfg(&e, p))?;
            let scores = score(&report.links, &truth);
            report.transitions = Some(scores.len());
            match success_rate(&scores) {
                Ok(r) => report.success_rate = Some(r),
                Err(e) => report.error = Some(e.to_string()),
            }
        }
        None if candidate_sets == 0 => report.error = Some(MetricsError::NoTransitions.to_string()),
        None => {}
    }
    Ok(report)
}
