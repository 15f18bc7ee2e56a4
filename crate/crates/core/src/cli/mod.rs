//! Command-line entry points.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{parse_grid, RunConfig};

use crate::backbone::{load_checkpoint, save_checkpoint, CheckpointHeader, EmbeddingModel};
use crate::dataset::{
    filter_attributes, group_stats, group_stats_csv, load_attributes, load_interactions, load_prepared, reindex,
    save_prepared, split, unfiltered_attributes, DataSplit, GroupMap, IdMaps, SplitManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::synth::{generate, write_raw};
use crate::trainer::{bilevel_train, epoch_log_csv};

/// Relative output directories are resolved under this directory when set.
pub const OUT_ROOT_ENV: &str = "FAIRNEG_OUT_ROOT";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "fairneg", version, about = "Fairness-aware negative sampling for recommenders")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// INI configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a configuration value; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed override: the split seed for `prepare`, the generator seed for
    /// `synth`, the training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest raw files (or generate synthetic data), split and write the
    /// prepared dataset.
    Prepare,
    /// Write a synthetic dataset in the raw ingestion formats.
    Synth,
    /// Train a model on prepared data and evaluate it on the test split.
    Train,
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare finished runs against a baseline run.
    Compare {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Baseline run directory name; defaults to the first UNS run.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Train over a grid of gamma and/or beta values.
    Sweep,
}

impl Command {
    fn default_out(&self) -> &'static str {
        match self {
            Command::Prepare => "prepared",
            Command::Synth => "synth",
            Command::Train => "run",
            Command::Evaluate { .. } => "eval",
            Command::Compare { .. } => "compare",
            Command::Sweep => "sweep",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_out(out: Option<PathBuf>, default: &str) -> PathBuf {
    let path = out.unwrap_or_else(|| PathBuf::from(default));
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        let key = match cli.command {
            Command::Prepare => "data.split_seed",
            Command::Synth => "synth.seed",
            _ => "train.seed",
        };
        config.apply_override(&format!("{key}={seed}"))?;
    }
    let out = resolve_out(cli.out, cli.command.default_out());
    match cli.command {
        Command::Prepare => cmd_prepare(&config, &out).map(|_| ()),
        Command::Synth => cmd_synth(&config, &out),
        Command::Train => cmd_train(&config, &out).map(|_| ()),
        Command::Evaluate { checkpoint } => cmd_evaluate(&config, &checkpoint, &out).map(|_| ()),
        Command::Compare { runs, baseline } => cmd_compare(&config, &runs, baseline.as_deref(), &out).map(|_| ()),
        Command::Sweep => cmd_sweep(&config, &out).map(|_| ()),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Prefixes every CSV line with the config and data hash columns.
pub fn stamp_csv(csv: &str, config_hash: &str, data_hash: &str) -> String {
    let mut out = String::with_capacity(csv.len() + 160 * csv.lines().count());
    for (n, line) in csv.lines().enumerate() {
        if n == 0 {
            out.push_str("config_hash,data_hash,");
        } else {
            out.push_str(&format!("{config_hash},{data_hash},"));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub config_hash: String,
    pub data_hash: String,
    pub config: String,
    pub excluded_items: usize,
    pub split: SplitManifest,
}

/// Builds the reindexed table either from raw files or from the generator.
fn ingest(config: &RunConfig) -> Result<(crate::dataset::InteractionTable, GroupMap, IdMaps, usize)> {
    if config.source() == "synth" {
        let data = generate(&config.synth_config()?)?;
        let ids = IdMaps {
            users: (0..data.table.num_users()).map(|u| format!("u{u}")).collect(),
            items: (0..data.table.num_items()).map(|i| format!("i{i}")).collect(),
        };
        return Ok((data.table, data.groups, ids, 0));
    }
    let (ipath, apath) = config.raw_paths()?;
    let pairs = load_interactions(&ipath, &config.record_format())?;
    let records = load_attributes(&apath, &config.attribute_format())?;
    let labels = config.labels();
    let filtered = if labels.is_empty() {
        unfiltered_attributes(&records)?
    } else {
        filter_attributes(&records, &labels, config.attribute_format().policy)?
    };
    let excluded = filtered.excluded.len();
    let (table, groups, ids) = reindex(&pairs, &filtered)?;
    Ok((table, groups, ids, excluded))
}

pub fn cmd_prepare(config: &RunConfig, out: &Path) -> Result<SplitManifest> {
    let (table, groups, ids, excluded) = ingest(config)?;
    let data_split = split(&table, config.split_seed())?;
    let manifest = save_prepared(out, &data_split, &groups)?;
    let config_hash = config.hash();
    let data_hash = manifest.data_hash();
    let stats = group_stats(&table, &groups);
    write(&out.join("group_stats.csv"), stamp_csv(&group_stats_csv(&stats), &config_hash, &data_hash))?;
    write(&out.join("users.tsv"), ids.users.iter().enumerate().map(|(i, u)| format!("{i}\t{u}\n")).collect::<String>())?;
    write(&out.join("items.tsv"), ids.items.iter().enumerate().map(|(i, u)| format!("{i}\t{u}\n")).collect::<String>())?;
    write_json(
        &out.join("prepare_manifest.json"),
        &PrepareManifest {
            config_hash,
            data_hash,
            config: config.canonical(),
            excluded_items: excluded,
            split: manifest.clone(),
        },
    )?;
    println!(
        "prepared {} users, {} items, {} interactions (train {}, validation {}, test {}) into {}",
        table.num_users(),
        table.num_items(),
        table.len(),
        manifest.sizes.train,
        manifest.sizes.validation,
        manifest.sizes.test,
        out.display()
    );
    for s in &stats {
        println!("  {}: {} items, {} feedback, {:.4} per item", s.label, s.items, s.feedback, s.feedback_per_item);
    }
    Ok(manifest)
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let data = generate(&config.synth_config()?)?;
    write_raw(out, &data)?;
    println!(
        "wrote {} interactions over {} users and {} items into {}",
        data.table.len(),
        data.table.num_users(),
        data.table.num_items(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub data_hash: String,
    pub strategy: String,
    pub config: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_validation_recall: f64,
    /// Not part of any hashed or compared content.
    pub wall_clock_seconds: f64,
}

/// A metric report tagged with the hashes it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub data_hash: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn write_reports(dir: &Path, reports: &[MetricReport], config_hash: &str, data_hash: &str) -> Result<()> {
    for r in reports {
        let csv = format!("{}\n{}\n", r.csv_header(), r.csv_row());
        write(&dir.join(format!("report_k{}.csv", r.k)), stamp_csv(&csv, config_hash, data_hash))?;
        write_json(
            &dir.join(format!("report_k{}.json", r.k)),
            &ReportFile {
                config_hash: config_hash.to_string(),
                data_hash: data_hash.to_string(),
                report: r.clone(),
            },
        )?;
    }
    Ok(())
}

fn test_reports(config: &RunConfig, model: &EmbeddingModel, split: &DataSplit, groups: &GroupMap) -> Result<Vec<MetricReport>> {
    evaluate(
        &model.embeddings(),
        &split.train,
        &split.validation,
        &split.test,
        groups,
        &config.ks()?,
        config.aggregation(),
    )
}

fn train_with_data(
    config: &RunConfig,
    out: &Path,
    split: &DataSplit,
    groups: &GroupMap,
    manifest: &SplitManifest,
) -> Result<Vec<MetricReport>> {
    let train_config = config.train_config()?;
    config.ks()?;
    let started = Instant::now();
    let outcome = bilevel_train(&train_config, split, groups)?;
    create_dir(out)?;
    let config_hash = config.hash();
    let data_hash = manifest.data_hash();
    let header = CheckpointHeader {
        backbone: train_config.backbone,
        dim: train_config.dim,
        layers: train_config.layers,
        num_users: split.train.num_users(),
        num_items: split.train.num_items(),
        seed: train_config.seed,
        l2: train_config.l2,
        epoch: outcome.best_epoch,
        config_hash: config_hash.clone(),
        data_hash: data_hash.clone(),
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.best_model, &header)?;
    let log = epoch_log_csv(&outcome.logs, groups.labels());
    write(&out.join("epoch_log.csv"), stamp_csv(&log, &config_hash, &data_hash))?;
    let reports = test_reports(config, &outcome.best_model, split, groups)?;
    write_reports(out, &reports, &config_hash, &data_hash)?;
    write_json(
        &out.join(RUN_MANIFEST_FILE),
        &RunManifest {
            command: "train".into(),
            config_hash,
            data_hash,
            strategy: train_config.sampler.strategy.name().into(),
            config: config.canonical(),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.logs.len(),
            best_validation_recall: outcome.best_validation_recall,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(reports)
}

fn print_reports(reports: &[MetricReport]) {
    for r in reports {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        println!(
            "  @{}: Recall-Disp {} Recall-Min {} Recall-Avg {} NDCG {:.4} P {:.4} R {:.4} F1 {:.4}",
            r.k,
            opt(r.recall_disp),
            opt(r.recall_min),
            opt(r.recall_avg),
            r.ndcg,
            r.precision,
            r.recall,
            r.f1
        );
    }
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<Vec<MetricReport>> {
    config.train_config()?;
    config.ks()?;
    let (split, groups, manifest) = load_prepared(&config.prepared_dir())?;
    let reports = train_with_data(config, out, &split, &groups, &manifest)?;
    println!("trained run written to {}", out.display());
    print_reports(&reports);
    Ok(reports)
}

pub fn cmd_evaluate(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<MetricReport>> {
    config.ks()?;
    let path = if checkpoint.is_dir() { checkpoint.join(CHECKPOINT_FILE) } else { checkpoint.to_path_buf() };
    let (split, groups, manifest) = load_prepared(&config.prepared_dir())?;
    let data_hash = manifest.data_hash();
    let (model, header) = load_checkpoint(&path, Some(&split.train))?;
    if header.data_hash != data_hash {
        return Err(Error::HashMismatch {
            what: format!("data of checkpoint {}", path.display()),
            expected: header.data_hash,
            found: data_hash,
        });
    }
    let reports = test_reports(config, &model, &split, &groups)?;
    create_dir(out)?;
    write_reports(out, &reports, &config.hash(), &data_hash)?;
    println!("evaluated {} into {}", path.display(), out.display());
    print_reports(&reports);
    Ok(reports)
}

/// Relative improvement over a baseline value, positive when better.
pub fn relative_improvement(lower_is_better: bool, baseline: f64, value: f64) -> Option<f64> {
    if baseline == 0.0 || !baseline.is_finite() || !value.is_finite() {
        return None;
    }
    Some(if lower_is_better { (baseline - value) / baseline } else { (value - baseline) / baseline })
}

struct LoadedRun {
    name: String,
    manifest: RunManifest,
    reports: Vec<MetricReport>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST_FILE))?;
    let mut reports = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("report_k") && name.ends_with(".json") {
            let file: ReportFile = read_json(&path)?;
            for (what, expected, found) in [
                ("config", &manifest.config_hash, &file.config_hash),
                ("data", &manifest.data_hash, &file.data_hash),
            ] {
                if expected != found {
                    return Err(Error::HashMismatch {
                        what: format!("{what} of {}", path.display()),
                        expected: expected.clone(),
                        found: found.clone(),
                    });
                }
            }
            reports.push(file.report);
        }
    }
    if reports.is_empty() {
        return Err(Error::Data(format!("{} holds no metric reports", dir.display())));
    }
    reports.sort_by_key(|r| r.k);
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun { name, manifest, reports })
}

const COMPARED: [&str; 7] = ["recall_disp", "recall_min", "recall_avg", "ndcg", "precision", "recall", "f1"];

fn metric(r: &MetricReport, name: &str) -> Option<f64> {
    match name {
        "recall_disp" => r.recall_disp,
        "recall_min" => r.recall_min,
        "recall_avg" => r.recall_avg,
        "ndcg" => Some(r.ndcg),
        "precision" => Some(r.precision),
        "recall" => Some(r.recall),
        "f1" => Some(r.f1),
        _ => None,
    }
}

/// Builds the comparison table: one row per run and k, with relative
/// improvement columns against the baseline run.
pub fn cmd_compare(config: &RunConfig, runs: &[PathBuf], baseline: Option<&str>, out: &Path) -> Result<String> {
    if runs.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let loaded = runs.iter().map(|r| load_run(r)).collect::<Result<Vec<_>>>()?;
    let data_hash = loaded[0].manifest.data_hash.clone();
    for run in &loaded[1..] {
        if run.manifest.data_hash != data_hash {
            return Err(Error::HashMismatch {
                what: format!("split of run {}", run.name),
                expected: data_hash,
                found: run.manifest.data_hash.clone(),
            });
        }
    }
    let base = match baseline {
        Some(name) => loaded
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Config(format!("baseline run {name:?} not among the compared runs")))?,
        None => loaded
            .iter()
            .find(|r| r.manifest.strategy == "uns")
            .ok_or_else(|| Error::Config("no UNS run to use as baseline; pass --baseline".into()))?,
    };

    let mut csv = String::from("run,strategy,k");
    for m in COMPARED {
        csv.push_str(&format!(",{m}"));
    }
    for m in COMPARED {
        csv.push_str(&format!(",ri_{m}"));
    }
    csv.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
    for run in &loaded {
        for r in &run.reports {
            let b = base.reports.iter().find(|b| b.k == r.k);
            csv.push_str(&format!("{},{},{}", run.name, run.manifest.strategy, r.k));
            for m in COMPARED {
                csv.push_str(&format!(",{}", fmt(metric(r, m))));
            }
            for m in COMPARED {
                let ri = b.and_then(|b| match (metric(b, m), metric(r, m)) {
                    (Some(bv), Some(v)) => relative_improvement(m == "recall_disp", bv, v),
                    _ => None,
                });
                csv.push_str(&format!(",{}", ri.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "NA".into())));
            }
            csv.push('\n');
        }
    }
    create_dir(out)?;
    let stamped = stamp_csv(&csv, &config.hash(), &data_hash);
    write(&out.join("compare.csv"), &stamped)?;
    print!("{csv}");
    Ok(stamped)
}

/// One sweep point's outcome.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub gamma: f64,
    pub beta: f64,
    pub dir: PathBuf,
    pub result: std::result::Result<Vec<MetricReport>, String>,
}

pub fn cmd_sweep(config: &RunConfig, out: &Path) -> Result<Vec<SweepPoint>> {
    let points = config.sweep_points()?;
    config.train_config()?;
    let ks = config.ks()?;
    let (split, groups, manifest) = load_prepared(&config.prepared_dir())?;
    create_dir(out)?;
    let run_point = |(i, &(gamma, beta)): (usize, &(f64, f64))| {
        let dir = out.join(format!("point{i:02}_gamma{gamma}_beta{beta}"));
        let result = (|| {
            let mut c = config.clone();
            c.apply_override(&format!("outer.gamma={gamma}"))?;
            c.apply_override(&format!("sampler.beta={beta}"))?;
            c.apply_override("sweep.gamma=")?;
            c.apply_override("sweep.beta=")?;
            train_with_data(&c, &dir, &split, &groups, &manifest)
        })()
        .map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::warn!("sweep point gamma={gamma} beta={beta} failed: {e}");
        }
        SweepPoint { gamma, beta, dir, result }
    };
    let results: Vec<SweepPoint> = if config.sweep_parallel() {
        points.par_iter().enumerate().map(run_point).collect()
    } else {
        points.iter().enumerate().map(run_point).collect()
    };

    let mut csv = String::from("point,gamma,beta,status");
    for k in &ks {
        for m in ["recall_disp", "recall_min", "recall_avg", "f1", "recall", "ndcg"] {
            csv.push_str(&format!(",{m}@{k}"));
        }
    }
    csv.push('\n');
    for (i, p) in results.iter().enumerate() {
        let status = match &p.result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        csv.push_str(&format!("{i},{},{},{status}", p.gamma, p.beta));
        for k in &ks {
            let r = p.result.as_ref().ok().and_then(|rs| rs.iter().find(|r| r.k == *k));
            for m in ["recall_disp", "recall_min", "recall_avg", "f1", "recall", "ndcg"] {
                let v = r.and_then(|r| metric(r, m));
                csv.push_str(&format!(",{}", v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())));
            }
        }
        csv.push('\n');
    }
    write(&out.join("sweep_summary.csv"), stamp_csv(&csv, &config.hash(), &manifest.data_hash()))?;
    print!("{csv}");
    if results.iter().all(|p| p.result.is_err()) {
        return Err(Error::Data("every sweep point failed".into()));
    }
    Ok(results)
}
