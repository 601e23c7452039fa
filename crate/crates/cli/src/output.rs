//! Hash-named run directories, CSV/JSON artifacts, manifests, sweeps and export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bslab_core::spectra::SpectrumReport;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_scalar, set_dotted, ExperimentConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::experiment::{execute, Execution, TRaise, TaskSummary};

pub const OUTPUT_ROOT_ENV: &str = "BSLAB_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "bslab-output";
/// Hex digits of the config hash used as the run directory name.
const DIR_HASH_LEN: usize = 16;

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub task: String,
    pub kind: String,
    pub path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub tool_version: String,
    pub started: String,
    pub finished: String,
    pub t_configured: f64,
    pub t_used: f64,
    pub t_raises: Vec<TRaise>,
    pub margins: Vec<f64>,
    pub warnings: Vec<String>,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub name: Option<String>,
    pub t_used: f64,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub summary: RunSummary,
    /// True when an identical earlier run was found and nothing was recomputed.
    pub reused: bool,
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_values_csv(path: &Path, report: &SpectrumReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["j", "s_j"])?;
    for (j, s) in report.singular.iter().enumerate() {
        w.write_record([(j + 1).to_string(), fmt(*s)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_counting_csv(path: &Path, report: &SpectrumReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "n_plus", "n_minus", "n"])?;
    for s in &report.counting {
        w.write_record([fmt(s.lambda), s.n_plus.to_string(), s.n_minus.to_string(), s.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    Ok(serde_json::from_reader(fs::File::open(path)?)?)
}

pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(&cfg.hash()[..DIR_HASH_LEN])
}

/// Runs a config under `root`, or returns the existing complete run with the same hash.
pub fn run_config(cfg: &ExperimentConfig, root: &Path) -> CliResult<RunOutcome> {
    let hash = cfg.hash();
    let dir = run_dir(root, cfg);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        if let Ok(manifest) = read_manifest(&manifest_path) {
            let complete = manifest.config_hash == hash && manifest.outputs.iter().all(|o| dir.join(&o.path).exists());
            if complete {
                let summary: RunSummary = serde_json::from_reader(fs::File::open(dir.join("summary.json"))?)?;
                return Ok(RunOutcome { dir, manifest, summary, reused: true });
            }
        }
    }
    let started = chrono::Utc::now().to_rfc3339();
    let Execution { outcomes, raises, warnings, t_used } = execute(cfg)?;
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    write_json(&dir.join("config.json"), cfg)?;
    outputs.push(OutputEntry { task: "-".into(), kind: "config".into(), path: "config.json".into() });
    for (i, outcome) in outcomes.iter().enumerate() {
        let task = outcome.summary.task.clone();
        for (name, report) in &outcome.reports {
            let stem = format!("{i:02}_{task}_{name}");
            let values = format!("{stem}_values.csv");
            let counting = format!("{stem}_counting.csv");
            write_values_csv(&dir.join(&values), report)?;
            write_counting_csv(&dir.join(&counting), report)?;
            outputs.push(OutputEntry { task: task.clone(), kind: format!("{name}_values"), path: values });
            outputs.push(OutputEntry { task: task.clone(), kind: format!("{name}_counting"), path: counting });
        }
    }
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.clone(),
        name: cfg.name.clone(),
        t_used,
        tasks: outcomes.into_iter().map(|o| o.summary).collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    outputs.push(OutputEntry { task: "-".into(), kind: "summary".into(), path: "summary.json".into() });
    let margins = summary.tasks.first().map(|t| t.margins.clone()).unwrap_or_default();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: hash,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        t_configured: cfg.operator.t,
        t_used,
        t_raises: raises,
        margins,
        warnings,
        outputs,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(RunOutcome { dir, manifest, summary, reused: false })
}

pub fn run_path(config: &Path, root: &Path) -> CliResult<RunOutcome> {
    run_config(&ExperimentConfig::load(config)?, root)
}

/// One row per (sweep value, task, spectrum) with a fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub task: String,
    pub spectrum: String,
    pub theta_hat: Option<f64>,
    pub coeff_hat: Option<f64>,
    pub r_squared: Option<f64>,
    pub run_dir: String,
}

pub struct SweepOutcome {
    pub runs: Vec<RunOutcome>,
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
}

/// Runs the config once per value of a dotted scalar field, in parallel.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String], root: &Path) -> CliResult<SweepOutcome> {
    if values.is_empty() {
        return Err(CliError::Validation("sweep needs at least one value".into()));
    }
    let doc = toml::Value::try_from(base).map_err(|e| CliError::Validation(e.to_string()))?;
    let configs = values
        .iter()
        .map(|v| {
            let mut d = doc.clone();
            set_dotted(&mut d, axis, parse_scalar(v))?;
            ExperimentConfig::from_value(d)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let runs = configs.par_iter().map(|c| run_config(c, root)).collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, run) in values.iter().zip(&runs) {
        for task in &run.summary.tasks {
            for s in &task.spectra {
                rows.push(SweepRow {
                    value: value.clone(),
                    task: task.task.clone(),
                    spectrum: s.name.clone(),
                    theta_hat: s.fit.map(|f| f.theta),
                    coeff_hat: s.fit.map(|f| f.coefficient),
                    r_squared: s.fit.map(|f| f.r_squared),
                    run_dir: run.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                });
            }
        }
    }
    let tag = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(base.hash());
        h.update(axis);
        for v in values {
            h.update([0u8]);
            h.update(v);
        }
        h.finalize().iter().take(DIR_HASH_LEN / 2).map(|b| format!("{b:02x}")).collect::<String>()
    };
    fs::create_dir_all(root)?;
    let csv_path = root.join(format!("sweep_{tag}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([axis, "task", "spectrum", "theta_hat", "coeff_hat", "r_squared", "run_dir"])?;
    let opt = |x: Option<f64>| x.map(fmt).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.value.clone(),
            r.task.clone(),
            r.spectrum.clone(),
            opt(r.theta_hat),
            opt(r.coeff_hat),
            opt(r.r_squared),
            r.run_dir.clone(),
        ])?;
    }
    w.flush()?;
    Ok(SweepOutcome { runs, rows, csv: csv_path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Fit table of a finished run, addressed by its manifest.
pub fn export(manifest_path: &Path, format: ExportFormat) -> CliResult<String> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let summary: RunSummary = serde_json::from_reader(fs::File::open(dir.join("summary.json"))?)?;
    if summary.config_hash != manifest.config_hash {
        return Err(CliError::Validation("summary and manifest hashes differ".into()));
    }
    match format {
        ExportFormat::Json => {
            let doc = serde_json::json!({ "manifest": manifest, "summary": summary });
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "task",
                "spectrum",
                "theta_hat",
                "coeff_hat",
                "prefactor",
                "slope",
                "first",
                "last",
                "r_squared",
            ])?;
            for t in &summary.tasks {
                for s in &t.spectra {
                    let row: Vec<String> = match &s.fit {
                        Some(f) => vec![
                            fmt(f.theta),
                            fmt(f.coefficient),
                            fmt(f.prefactor),
                            fmt(f.slope),
                            f.window.0.to_string(),
                            f.window.1.to_string(),
                            fmt(f.r_squared),
                        ],
                        None => vec![String::new(); 7],
                    };
                    let mut rec = vec![t.task.clone(), s.name.clone()];
                    rec.extend(row);
                    w.write_record(&rec)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
    }
}
