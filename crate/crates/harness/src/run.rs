//! Writes per-seed CSV files and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::error::HarnessError;
use crate::simulate::{simulate_seed, SeedRun};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "manifest.json";

/// Decimal text with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Summary of one seed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
    pub time_averaged_rmse: Option<f64>,
    pub mean_kl: Option<f64>,
    pub gaussian_resamples: usize,
    pub error: Option<String>,
    /// True when the error came from the numerics rather than file output.
    #[serde(default)]
    pub numerical_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub experiment: String,
    pub filter: String,
    pub n: usize,
    /// Canonical config echo.
    pub config: BTreeMap<String, String>,
    pub output_dir: PathBuf,
    pub seeds: Vec<SeedEntry>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn failed_seeds(&self) -> impl Iterator<Item = &SeedEntry> {
        self.seeds.iter().filter(|s| s.error.is_some())
    }

    /// Mean time-averaged RMSE over the successful seeds.
    pub fn mean_rmse(&self) -> Option<f64> {
        mean(self.seeds.iter().filter_map(|s| s.time_averaged_rmse))
    }

    pub fn mean_kl(&self) -> Option<f64> {
        mean(self.seeds.iter().filter_map(|s| s.mean_kl))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Manifest(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub(crate) fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Runs every seed (in parallel) without touching the file system.
///
/// Results are returned in seed order.
pub fn simulate_all(cfg: &ExperimentConfig) -> Vec<(u64, Result<SeedRun, HarnessError>)> {
    cfg.seeds
        .par_iter()
        .map(|&s| (s, simulate_seed(cfg, s)))
        .collect()
}

pub(crate) fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<(), HarnessError> {
    fs::write(path, csv_text(header, rows)).map_err(|e| HarnessError::io(path, e))
}

/// CSV text with a header row and 17-digit floats.
pub fn csv_text(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn state_header(m: usize) -> Vec<String> {
    std::iter::once("time".to_string())
        .chain((1..=m).map(|i| format!("x{i}")))
        .collect()
}

/// Writes the CSV files of one seed into `dir`; returns their names.
pub fn write_seed_files(dir: &Path, run: &SeedRun) -> Result<Vec<String>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let m = run.truth.nrows();
    let mut files = Vec::new();
    let states = |mat: &nalgebra::DMatrix<f64>| {
        (0..mat.ncols())
            .map(|k| {
                std::iter::once(run.times[k])
                    .chain(mat.column(k).iter().copied())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    write_csv(
        &dir.join("truth.csv"),
        &state_header(m),
        states(&run.truth).into_iter(),
    )?;
    files.push("truth.csv".to_string());
    write_csv(
        &dir.join("estimate.csv"),
        &state_header(m),
        states(&run.estimate).into_iter(),
    )?;
    files.push("estimate.csv".to_string());
    write_csv(
        &dir.join("rmse.csv"),
        &["time".into(), "rmse".into()],
        run.rmse
            .times
            .iter()
            .zip(&run.rmse.values)
            .map(|(t, v)| vec![*t, *v]),
    )?;
    files.push("rmse.csv".to_string());
    write_csv(
        &dir.join("diagnostics.csv"),
        &["time".into(), "n_eff".into(), "gaussian_resampled".into()],
        run.diagnostics.iter().map(|d| {
            vec![
                d.time,
                d.n_eff,
                if d.gaussian_resampled { 1.0 } else { 0.0 },
            ]
        }),
    )?;
    files.push("diagnostics.csv".to_string());
    if let Some(g) = &run.posterior_grid {
        let mut header = vec!["x".to_string()];
        header.extend(g.columns.iter().map(|(n, _)| n.clone()));
        let points = g.columns[0].1.points();
        write_csv(
            &dir.join("posterior_grid.csv"),
            &header,
            (0..points.len()).map(|i| {
                std::iter::once(points[i])
                    .chain(g.columns.iter().map(|(_, d)| d.values()[i]))
                    .collect()
            }),
        )?;
        files.push("posterior_grid.csv".to_string());
    }
    if let Some(kl) = &run.kl {
        write_csv(
            &dir.join("kl.csv"),
            &["time".into(), "kl".into()],
            kl.times.iter().zip(&kl.values).map(|(t, v)| vec![*t, *v]),
        )?;
        files.push("kl.csv".to_string());
    }
    Ok(files)
}

/// Directory of one seed inside a run directory.
pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Runs all seeds, writes their outputs under `cfg.output` and returns the
/// manifest (also written as `manifest.json`).
///
/// A failing seed is recorded in the manifest and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let start = Instant::now();
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let results: Vec<SeedEntry> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut entry = SeedEntry {
                seed,
                files: Vec::new(),
                time_averaged_rmse: None,
                mean_kl: None,
                gaussian_resamples: 0,
                error: None,
                numerical_failure: false,
            };
            match simulate_seed(cfg, seed) {
                Ok(run) => {
                    let sub = seed_dir(seed);
                    match write_seed_files(&out.join(&sub), &run) {
                        Ok(files) => {
                            entry.files = files.into_iter().map(|f| format!("{sub}/{f}")).collect();
                            entry.time_averaged_rmse = Some(run.time_averaged_rmse);
                            entry.mean_kl = run.mean_kl();
                            entry.gaussian_resamples = run
                                .diagnostics
                                .iter()
                                .filter(|d| d.gaussian_resampled)
                                .count();
                        }
                        Err(e) => entry.error = Some(e.to_string()),
                    }
                }
                Err(e) => {
                    entry.numerical_failure = e.exit_code() == 3;
                    entry.error = Some(e.to_string());
                }
            }
            entry
        })
        .collect();
    let manifest = RunManifest {
        version: VERSION.to_string(),
        experiment: cfg.experiment.to_string(),
        filter: cfg.filter.to_string(),
        n: cfg.n,
        config: cfg.to_pairs().into_iter().collect(),
        output_dir: out.clone(),
        seeds: results,
        duration_seconds: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

fn write_manifest<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| HarnessError::Manifest(e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| HarnessError::io(path, e))
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: String,
    pub run_dir: PathBuf,
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub mean_kl: Option<f64>,
    pub failed_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub version: String,
    pub param: String,
    pub output_dir: PathBuf,
    pub entries: Vec<SweepEntry>,
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep_param(spec: &str) -> Result<(String, Vec<String>), ConfigError> {
    let invalid = |m: &str| ConfigError::Validation {
        field: "param".into(),
        message: m.into(),
    };
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| invalid("expected key=v1,v2,..."))?;
    let values: Vec<String> = v
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if k.trim().is_empty() || values.is_empty() {
        return Err(invalid("expected key=v1,v2,..."));
    }
    Ok((k.trim().to_string(), values))
}

/// Applies one sweep value to a copy of `cfg`.
pub fn sweep_config(
    cfg: &ExperimentConfig,
    key: &str,
    value: &str,
) -> Result<ExperimentConfig, ConfigError> {
    let mut c = cfg.clone();
    if matches!(key, "experiment" | "model.kind" | "output") || !c.set(key, value)? {
        return Err(ConfigError::Validation {
            field: key.to_string(),
            message: "not a sweepable key".into(),
        });
    }
    c.output = cfg.output.join(format!("{key}={value}"));
    c.validate()?;
    Ok(c)
}

/// Runs the configuration once per value of `key`, each in its own
/// subdirectory, then writes `sweep.csv` and `sweep.json`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    key: &str,
    values: &[String],
) -> Result<SweepManifest, HarnessError> {
    let configs = values
        .iter()
        .map(|v| sweep_config(cfg, key, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        let m = run_experiment(c)?;
        let rmses: Vec<f64> = m
            .seeds
            .iter()
            .filter_map(|s| s.time_averaged_rmse)
            .collect();
        entries.push(SweepEntry {
            value: value.clone(),
            run_dir: c.output.clone(),
            mean_rmse: m.mean_rmse(),
            std_rmse: if rmses.is_empty() {
                None
            } else {
                Some(std_dev(&rmses))
            },
            mean_kl: m.mean_kl(),
            failed_seeds: m.failed_seeds().count(),
        });
    }
    let manifest = SweepManifest {
        version: VERSION.to_string(),
        param: key.to_string(),
        output_dir: cfg.output.clone(),
        entries,
    };
    fs::create_dir_all(&cfg.output).map_err(|e| HarnessError::io(&cfg.output, e))?;
    write_sweep_table(&cfg.output.join("sweep.csv"), &manifest)?;
    write_manifest(&cfg.output.join("sweep.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_sweep_table(path: &Path, sweep: &SweepManifest) -> Result<(), HarnessError> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut out = format!("{},mean_rmse,std_rmse,mean_kl,failed_seeds\n", sweep.param);
    for e in &sweep.entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.value,
            opt(e.mean_rmse),
            opt(e.std_rmse),
            opt(e.mean_kl),
            e.failed_seeds
        ));
    }
    fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        for v in [0.1, 1.0 / 3.0, 6.02e23, -1e-300, 12.13] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn sweep_param_parsing() {
        let (k, v) = parse_sweep_param("N=100,200, 400").unwrap();
        assert_eq!(k, "N");
        assert_eq!(v, vec!["100", "200", "400"]);
        assert!(parse_sweep_param("N").is_err());
        assert!(parse_sweep_param("N=").is_err());
    }

    #[test]
    fn sweep_rejects_unknown_and_fixed_keys() {
        let cfg = crate::config::parse_config("experiment = ex2").unwrap();
        assert_eq!(
            sweep_config(&cfg, "foo", "1").unwrap_err().field(),
            Some("foo")
        );
        assert_eq!(
            sweep_config(&cfg, "experiment", "ex3").unwrap_err().field(),
            Some("experiment")
        );
        assert_eq!(sweep_config(&cfg, "N", "0").unwrap_err().field(), Some("N"));
        let c = sweep_config(&cfg, "N", "400").unwrap();
        assert_eq!(c.n, 400);
        assert_eq!(c.output, cfg.output.join("N=400"));
    }
}
