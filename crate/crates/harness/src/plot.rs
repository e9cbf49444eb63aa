//! Plot-ready tables derived from completed runs.
//!
//! | file | columns |
//! |------|---------|
//! | `density.csv` | `x`, the first seed's grid columns, `estimate_seed_mean` |
//! | `error_vs_time.csv` | `time`, `truth_i`, `estimate_i`, `abs_error_i` (first seed) |
//! | `rmse_vs_time.csv` | `time`, `rmse_mean`, `rmse_seed_<s>` |
//! | `kl_by_seed.csv` | `seed`, `mean_kl` |
//! | `rmse_vs_<param>.csv` | `<param>`, `mean_rmse`, `std_rmse`, `mean_kl`, `failed_seeds` |

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::HarnessError;
use crate::run::{csv_text, write_csv, write_sweep_table, RunManifest, SeedEntry, SweepManifest};
use crate::simulate::StaticOracle;

pub const PLOT_DIR: &str = "plot";

/// A parsed CSV file with a header row. Empty cells read as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|_| HarnessError::MissingRun(path.display().to_string()))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| HarnessError::MissingRun(format!("{} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|c| {
                    if c.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        c.parse::<f64>()
                    }
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| {
                    HarnessError::Manifest(format!("{} row {}: {e}", path.display(), i + 2))
                })?;
            if row.len() != header.len() {
                return Err(HarnessError::Manifest(format!(
                    "{} row {}: {} cells for {} columns",
                    path.display(),
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

fn seed_file(
    manifest: &RunManifest,
    seed: &SeedEntry,
    name: &str,
) -> Result<PathBuf, HarnessError> {
    let rel = seed
        .files
        .iter()
        .find(|f| f.rsplit('/').next() == Some(name))
        .ok_or_else(|| HarnessError::MissingRun(format!("seed {} has no {name}", seed.seed)))?;
    let path = manifest.output_dir.join(rel);
    if !path.exists() {
        return Err(HarnessError::MissingRun(path.display().to_string()));
    }
    Ok(path)
}

/// Writes the plot tables of a completed run into `<run>/plot/`.
pub fn emit_plot_data(manifest: &RunManifest) -> Result<Vec<PathBuf>, HarnessError> {
    let ok: Vec<&SeedEntry> = manifest
        .seeds
        .iter()
        .filter(|s| s.error.is_none())
        .collect();
    if ok.is_empty() {
        return Err(HarnessError::MissingRun(
            "manifest lists no completed seeds".into(),
        ));
    }
    for s in &ok {
        for f in &s.files {
            let p = manifest.output_dir.join(f);
            if !p.exists() {
                return Err(HarnessError::MissingRun(p.display().to_string()));
            }
        }
    }
    let dir = manifest.output_dir.join(PLOT_DIR);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut written = Vec::new();
    let first = ok[0];

    if first
        .files
        .iter()
        .any(|f| f.ends_with("posterior_grid.csv"))
    {
        let grids = ok
            .iter()
            .map(|s| Table::read(&seed_file(manifest, s, "posterior_grid.csv")?))
            .collect::<Result<Vec<_>, _>>()?;
        let base = &grids[0];
        let est: Vec<Vec<f64>> = grids
            .iter()
            .map(|g| {
                g.column("estimate")
                    .ok_or_else(|| HarnessError::Manifest("posterior grid lacks estimate".into()))
            })
            .collect::<Result<_, _>>()?;
        let mut header = base.header.clone();
        header.push("estimate_seed_mean".into());
        let path = dir.join("density.csv");
        write_csv(
            &path,
            &header,
            base.rows.iter().enumerate().map(|(i, r)| {
                let mut row = r.clone();
                row.push(est.iter().map(|e| e[i]).sum::<f64>() / est.len() as f64);
                row
            }),
        )?;
        written.push(path);
    }

    let truth = Table::read(&seed_file(manifest, first, "truth.csv")?)?;
    let estimate = Table::read(&seed_file(manifest, first, "estimate.csv")?)?;
    if truth.rows.len() != estimate.rows.len() {
        return Err(HarnessError::Manifest(
            "truth and estimate lengths differ".into(),
        ));
    }
    let m = truth.header.len() - 1;
    let mut header = vec!["time".to_string()];
    header.extend((1..=m).map(|i| format!("truth_{i}")));
    header.extend((1..=m).map(|i| format!("estimate_{i}")));
    header.extend((1..=m).map(|i| format!("abs_error_{i}")));
    let path = dir.join("error_vs_time.csv");
    write_csv(
        &path,
        &header,
        truth.rows.iter().zip(&estimate.rows).map(|(t, e)| {
            let mut row = vec![t[0]];
            row.extend(&t[1..]);
            row.extend(&e[1..]);
            row.extend(t[1..].iter().zip(&e[1..]).map(|(a, b)| (a - b).abs()));
            row
        }),
    )?;
    written.push(path);

    let rmse = ok
        .iter()
        .map(|s| Table::read(&seed_file(manifest, s, "rmse.csv")?))
        .collect::<Result<Vec<_>, _>>()?;
    let len = rmse[0].rows.len();
    if rmse.iter().any(|t| t.rows.len() != len) {
        return Err(HarnessError::Manifest(
            "rmse series lengths differ between seeds".into(),
        ));
    }
    let mut header = vec!["time".to_string(), "rmse_mean".to_string()];
    header.extend(ok.iter().map(|s| format!("rmse_seed_{}", s.seed)));
    let path = dir.join("rmse_vs_time.csv");
    write_csv(
        &path,
        &header,
        (0..len).map(|k| {
            let vals: Vec<f64> = rmse.iter().map(|t| t.rows[k][1]).collect();
            let mut row = vec![
                rmse[0].rows[k][0],
                vals.iter().sum::<f64>() / vals.len() as f64,
            ];
            row.extend(vals);
            row
        }),
    )?;
    written.push(path);

    if ok.iter().any(|s| s.mean_kl.is_some()) {
        let path = dir.join("kl_by_seed.csv");
        write_csv(
            &path,
            &["seed".into(), "mean_kl".into()],
            ok.iter()
                .filter_map(|s| s.mean_kl.map(|k| vec![s.seed as f64, k])),
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `rmse_vs_<param>.csv` for a sweep.
pub fn emit_sweep_plot_data(sweep: &SweepManifest) -> Result<PathBuf, HarnessError> {
    if sweep.entries.is_empty() {
        return Err(HarnessError::MissingRun("sweep has no entries".into()));
    }
    for e in &sweep.entries {
        let m = e.run_dir.join(crate::run::MANIFEST_NAME);
        if !m.exists() {
            return Err(HarnessError::MissingRun(m.display().to_string()));
        }
    }
    let dir = sweep.output_dir.join(PLOT_DIR);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let path = dir.join(format!("rmse_vs_{}.csv", sweep.param));
    write_sweep_table(&path, sweep)?;
    Ok(path)
}

/// The static problem's grid curves as CSV text.
pub fn static_oracle_csv(oracle: &StaticOracle) -> String {
    let x = oracle.prior.points();
    csv_text(
        &[
            "x".into(),
            "prior".into(),
            "likelihood".into(),
            "posterior".into(),
        ],
        (0..x.len()).map(|i| {
            vec![
                x[i],
                oracle.prior.values()[i],
                oracle.likelihood[i],
                oracle.posterior.values()[i],
            ]
        }),
    )
}
