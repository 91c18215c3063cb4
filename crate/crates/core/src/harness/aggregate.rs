//! Cross-trial IQM and bootstrap intervals per window.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diagnostics::{bootstrap_ci, iqm, IqmSummary, DEFAULT_BOOTSTRAP};
use crate::harness::run::WINDOW_HEADER;
use crate::{Error, Result};

/// Seed of the resampling stream, fixed so summaries are reproducible.
pub const AGGREGATE_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub step: u64,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_trials: usize,
}

/// Column index of `metric` in the trial CSVs.
pub fn metric_column(metric: &str) -> Result<usize> {
    WINDOW_HEADER
        .iter()
        .skip(2)
        .position(|&c| c == metric)
        .map(|i| i + 2)
        .ok_or_else(|| {
            Error::Config(format!("unknown metric `{metric}`, expected one of {:?}", &WINDOW_HEADER[2..]))
        })
}

/// Windowed trial CSVs in `dir`, sorted by name.
pub fn trial_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trial_") && n.ends_with(".csv") && !n.contains("_raw") && !n.contains("_visits"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// `(step, value)` pairs of one trial file.
pub fn read_trial_metric(path: &Path, column: usize) -> Result<Vec<(u64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse_err = || Error::Alignment(format!("malformed row in {}", path.display()));
        let step: u64 = record.get(1).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let value: f64 = record.get(column).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        out.push((step, value));
    }
    Ok(out)
}

/// IQM with a bootstrap interval, or the point itself for a single trial.
pub fn summarize(values: &[f64], rng: &mut ChaCha8Rng) -> Result<IqmSummary> {
    match values.len() {
        0 => Err(Error::Contract("no values to summarize".into())),
        1 => Ok(IqmSummary::point(iqm(values)?)),
        _ => bootstrap_ci(values, DEFAULT_BOOTSTRAP, rng),
    }
}

/// Summarizes `metric` across trials for every directory; the method label is
/// the directory name.
pub fn aggregate(dirs: &[PathBuf], metric: &str) -> Result<Vec<SummaryRow>> {
    let column = metric_column(metric)?;
    let mut rng = ChaCha8Rng::seed_from_u64(AGGREGATE_SEED);
    let mut rows = Vec::new();
    for dir in dirs {
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let files = trial_files(dir)?;
        if files.is_empty() {
            return Err(Error::Alignment(format!("no trial files in {}", dir.display())));
        }
        let trials: Vec<Vec<(u64, f64)>> =
            files.iter().map(|f| read_trial_metric(f, column)).collect::<Result<_>>()?;
        let grid: Vec<u64> = trials[0].iter().map(|&(s, _)| s).collect();
        for (file, trial) in files.iter().zip(&trials) {
            if trial.len() != grid.len() || trial.iter().zip(&grid).any(|(&(s, _), &g)| s != g) {
                return Err(Error::Alignment(format!(
                    "{} does not share the window grid of {}",
                    file.display(),
                    files[0].display()
                )));
            }
        }
        let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for trial in &trials {
            for &(step, value) in trial {
                by_step.entry(step).or_default().push(value);
            }
        }
        for (step, values) in by_step {
            let s = summarize(&values, &mut rng)?;
            rows.push(SummaryRow {
                method: label.clone(),
                step,
                iqm: s.iqm,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
                n_trials: values.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["method", "step", "iqm", "ci_low", "ci_high", "n_trials"])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::{write_window_csv, WindowRow};

    fn write_trial(dir: &Path, k: usize, steps: &[u64], value: f64) {
        let rows: Vec<WindowRow> = steps
            .iter()
            .map(|&step| WindowRow { trial: k, step, mean_true_cost: value, mean_shaped_cost: value, destab_frac: 0.0 })
            .collect();
        write_window_csv(&dir.join(format!("trial_{k:03}.csv")), &rows).unwrap();
    }

    #[test]
    fn constant_trials_collapse() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("m");
        fs::create_dir(&dir).unwrap();
        for k in 0..4 {
            write_trial(&dir, k, &[10, 20], 3.5);
        }
        let rows = aggregate(&[dir], "mean_true_cost").unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!((r.method.as_str(), r.iqm, r.ci_low, r.ci_high, r.n_trials), ("m", 3.5, 3.5, 3.5, 4));
        }
    }

    #[test]
    fn single_trial_is_a_point() {
        let tmp = tempfile::tempdir().unwrap();
        write_trial(tmp.path(), 0, &[5], 2.0);
        let rows = aggregate(&[tmp.path().to_path_buf()], "mean_shaped_cost").unwrap();
        assert_eq!((rows[0].iqm, rows[0].ci_low, rows[0].ci_high, rows[0].n_trials), (2.0, 2.0, 2.0, 1));
    }

    #[test]
    fn misaligned_grids_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_trial(tmp.path(), 0, &[10, 20], 1.0);
        write_trial(tmp.path(), 1, &[10, 25], 1.0);
        assert!(matches!(aggregate(&[tmp.path().to_path_buf()], "destab_frac"), Err(Error::Alignment(_))));
    }

    #[test]
    fn unknown_metric_is_a_config_error() {
        assert!(metric_column("queue").unwrap_err().is_config());
        assert_eq!(metric_column("destab_frac").unwrap(), 4);
    }
}
