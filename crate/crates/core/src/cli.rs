//! `gridpulse` command line: run the pipeline stages without the service.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on I/O
//! errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analytics::TrendAxis;
use crate::config::ApiConfig;
use crate::geo::ZipTable;
use crate::influence::ClusterAssignment;
use crate::ingest::{run_poll_cycle, CycleError, CycleErrorKind, LifecycleStage, ReplaySource};
use crate::pipeline::{self, read_json, write_json};
use crate::store::Store;
use crate::time::{self, Timestamp};
use crate::vulnerability::{load_feature_csv, VulnerabilityIndex};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "gridpulse", version, about = "Power outage tracking, ranking and prediction")]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory holding the store, reference tables and artifacts
    #[arg(long, global = true, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    step_hours: Option<i64>,
    #[arg(long, global = true, value_name = "N")]
    clusters: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    samples: Option<u64>,
    /// Output file (a directory for `analyze`)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replay a directory of snapshot files through the lifecycle
    IngestReplay { dir: PathBuf },
    /// Rank zip codes by vulnerability
    Index { features: Option<PathBuf> },
    /// Borough rates, demographic trends, causes and binned transitions
    Analyze,
    /// Group zip codes into clusters
    Cluster,
    /// Fit the cluster transition matrix on the stored history
    Fit,
    /// Predict next-step outages per cluster
    Predict {
        /// Reference time (RFC3339); defaults to now
        #[arg(long, value_name = "TIME")]
        at: Option<String>,
    },
    /// Run the HTTP API
    Serve {
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
    },
    /// Write a table as CSV
    Export { table: Table },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Table {
    Processed,
    Historical,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ApiConfig> {
    let mut cfg = ApiConfig::load(cli.config.as_deref())?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    cfg.seed = cli.seed.or(cfg.seed);
    cfg.step_hours = cli.step_hours.unwrap_or(cfg.step_hours);
    cfg.clusters = cli.clusters.unwrap_or(cfg.clusters);
    cfg.samples = cli.samples.unwrap_or(cfg.samples);
    cfg.validate()?;
    Ok(cfg)
}

/// The configured seed, or a fresh one that ends up in the artifact.
fn resolve_seed(cfg: &ApiConfig) -> u64 {
    cfg.seed.unwrap_or_else(|| {
        let seed = rand::random();
        eprintln!("no seed given; using {seed}");
        seed
    })
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::IngestReplay { dir } => ingest_replay(&cfg, &dir, out),
        Command::Index { features } => index(&cfg, features.as_deref(), out),
        Command::Analyze => analyze(&cfg, out),
        Command::Cluster => {
            let zips = ZipTable::load(&cfg.zips_path())?;
            let clusters = pipeline::cluster_zips(&zips, &cfg, resolve_seed(&cfg))?;
            let path = out.map_or_else(|| cfg.clusters_path(), Path::to_path_buf);
            write_json(&path, &clusters)?;
            println!("clustered {} zips into {} clusters -> {}", clusters.assignment.len(), clusters.k, path.display());
            Ok(())
        }
        Command::Fit => fit(&cfg, out),
        Command::Predict { at } => predict(&cfg, at.as_deref(), out),
        Command::Serve { listen } => {
            let mut cfg = cfg;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(crate::service::serve(cfg))
        }
        Command::Export { table } => {
            let stage = match table {
                Table::Processed => LifecycleStage::Processed,
                Table::Historical => LifecycleStage::Historical,
            };
            let bytes = Store::open(&cfg.database_path())?.export_csv(stage)?;
            match out {
                Some(path) => std::fs::write(path, bytes).map_err(|e| Error::io(path, e)),
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&bytes).map_err(|e| Error::io("stdout", e))
                }
            }
        }
    }
}

#[derive(Debug, Default, Serialize)]
struct ReplaySummary {
    cycles: usize,
    applied: usize,
    promoted: usize,
    retired: usize,
    updated: usize,
    processed: usize,
    historical: usize,
    /// Snapshots at or before the last one already in the store.
    stale: usize,
    errors: Vec<CycleError>,
}

fn ingest_replay(cfg: &ApiConfig, dir: &Path, out: Option<&Path>) -> Result<()> {
    let store = Store::open(&cfg.database_path())?;
    let zips = std::sync::Arc::new(ZipTable::load(&cfg.zips_path())?);
    let geocoder = pipeline::open_geocoder(cfg, zips)?;
    let mut source = ReplaySource::open(dir)?;
    let mut summary = ReplaySummary::default();
    while source.remaining() > 0 {
        let report = run_poll_cycle(&mut source, &store, geocoder.as_ref(), Utc::now());
        summary.cycles += 1;
        if !report.skipped() {
            summary.applied += 1;
        }
        summary.promoted += report.promoted;
        summary.retired += report.retired;
        summary.updated += report.updated;
        for e in report.errors {
            if e.kind == CycleErrorKind::Stale {
                summary.stale += 1;
            } else {
                summary.errors.push(e);
            }
        }
    }
    summary.processed = store.count(LifecycleStage::Processed)?;
    summary.historical = store.count(LifecycleStage::Historical)?;
    if let Some(path) = out {
        write_json(path, &summary)?;
    }
    println!(
        "replayed {} snapshots ({} applied, {} already ingested): {} promoted, {} retired; {} processed, {} historical",
        summary.cycles,
        summary.applied,
        summary.stale,
        summary.promoted,
        summary.retired,
        summary.processed,
        summary.historical
    );
    for e in &summary.errors {
        eprintln!("cycle error ({:?}): {}", e.kind, e.message);
    }
    if summary.errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{} replay errors", summary.errors.len())))
    }
}

fn index(cfg: &ApiConfig, features: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let path = features.map_or_else(|| cfg.features_path(), Path::to_path_buf);
    let idx = VulnerabilityIndex::build(&load_feature_csv(&path)?)?;
    let target = out.map_or_else(|| cfg.rankings_path(), Path::to_path_buf);
    write_json(&target, &idx)?;
    println!("ranked {} zips -> {}", idx.zip_count, target.display());
    Ok(())
}

fn analyze(cfg: &ApiConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.map_or_else(|| cfg.analytics_dir(), Path::to_path_buf);
    let store = Store::open(&cfg.database_path())?;
    let history = store.history()?;
    let zips = ZipTable::load(&cfg.zips_path())?;

    write_json(&dir.join("per_capita.json"), &pipeline::per_capita_payload(&history, &zips)?)?;
    write_json(&dir.join("causes.json"), &pipeline::causes_payload(&history))?;
    let series = pipeline::history_series(&pipeline::outage_events(&history), cfg.step())?;
    write_json(&dir.join("series.json"), &series)?;
    match pipeline::transition_bins_payload(&series) {
        Ok(bins) => {
            write_json(&dir.join("transition_bins.json"), &bins)?;
            let counts = crate::analytics::transition_counts(&series)?;
            let csv_path = dir.join("transition_bins.csv");
            std::fs::write(&csv_path, counts.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        }
        Err(e) => eprintln!("skipping transition bins: {e}"),
    }
    if cfg.demographics_path().exists() {
        let demographics = crate::analytics::load_demographics_csv(&cfg.demographics_path())?;
        for (axis, name) in [(TrendAxis::Income, "trend_income.json"), (TrendAxis::Nonwhite, "trend_nonwhite.json")] {
            match pipeline::trend_payload(&history, &demographics, axis) {
                Ok(t) => write_json(&dir.join(name), &t)?,
                Err(e) => eprintln!("skipping {name}: {e}"),
            }
        }
    } else {
        eprintln!("skipping trends: {} not found", cfg.demographics_path().display());
    }
    println!("analytics over {} outages -> {}", history.len(), dir.display());
    Ok(())
}

fn load_or_cluster(cfg: &ApiConfig, seed: u64) -> Result<ClusterAssignment> {
    let path = cfg.clusters_path();
    if path.exists() {
        let c: ClusterAssignment = read_json(&path)?;
        c.validate()?;
        return Ok(c);
    }
    let zips = ZipTable::load(&cfg.zips_path())?;
    let c = pipeline::cluster_zips(&zips, cfg, seed)?;
    write_json(&path, &c)?;
    eprintln!("no cluster assignment found; wrote {}", path.display());
    Ok(c)
}

fn fit(cfg: &ApiConfig, out: Option<&Path>) -> Result<()> {
    let seed = resolve_seed(cfg);
    let clusters = load_or_cluster(cfg, seed)?;
    let history = Store::open(&cfg.database_path())?.history()?;
    let model = pipeline::fit_model(&history, &clusters, cfg, seed)?;
    let path = out.map_or_else(|| cfg.model_path(), Path::to_path_buf);
    write_json(&path, &model)?;
    println!(
        "fitted {0}×{0} transition matrix on {1} steps (s = {2}) -> {3}",
        model.k(),
        model.training_steps,
        model.samples,
        path.display()
    );
    Ok(())
}

fn predict(cfg: &ApiConfig, at: Option<&str>, out: Option<&Path>) -> Result<()> {
    let model_path = cfg.model_path();
    if !model_path.exists() {
        return Err(Error::Validation(format!(
            "no fitted model at {}; run `gridpulse fit` first",
            model_path.display()
        )));
    }
    let model = read_json(&model_path)?;
    let clusters_path = cfg.clusters_path();
    if !clusters_path.exists() {
        return Err(Error::Validation(format!(
            "no cluster assignment at {}; run `gridpulse cluster` first",
            clusters_path.display()
        )));
    }
    let clusters: ClusterAssignment = read_json(&clusters_path)?;
    let now: Timestamp = match at {
        Some(s) => time::parse(s)?,
        None => time::truncate(Utc::now()),
    };
    let history = Store::open(&cfg.database_path())?.history()?;
    let prediction = pipeline::prediction_payload(&history, &clusters, &model, cfg.step(), now)?;
    let path = out.map_or_else(|| cfg.data_dir.join("prediction.json"), Path::to_path_buf);
    write_json(&path, &prediction)?;
    println!("{}", serde_json::to_string_pretty(&prediction).expect("prediction serializes"));
    Ok(())
}
