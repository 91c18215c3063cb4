//! Seeded parallel trials with windowed metric output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::arppo::{train_observed, MetricsRow};
use crate::diagnostics::visitation_grid;
use crate::environments::{EnvConfig, State};
use crate::harness::config::ExperimentConfig;
use crate::{Error, Result};

pub const WINDOW_HEADER: [&str; 5] = ["trial", "step", "mean_true_cost", "mean_shaped_cost", "destab_frac"];

/// One windowed row of a trial CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowRow {
    pub trial: usize,
    /// Last step covered by the window.
    pub step: u64,
    pub mean_true_cost: f64,
    pub mean_shaped_cost: f64,
    pub destab_frac: f64,
}

/// Streaming window means; a trailing partial window is flushed at the end.
#[derive(Debug, Clone)]
pub struct Windower {
    trial: usize,
    window: u64,
    count: u64,
    true_sum: f64,
    shaped_sum: f64,
    destab: u64,
    rows: Vec<WindowRow>,
}

impl Windower {
    pub fn new(trial: usize, window: u64) -> Self {
        Self { trial, window, count: 0, true_sum: 0.0, shaped_sum: 0.0, destab: 0, rows: Vec::new() }
    }

    pub fn push(&mut self, row: &MetricsRow) {
        self.count += 1;
        self.true_sum += row.true_cost;
        self.shaped_sum += row.shaped_cost;
        self.destab += u64::from(row.destabilizing);
        if self.count == self.window {
            self.flush(row.step);
        }
    }

    fn flush(&mut self, step: u64) {
        let n = self.count as f64;
        self.rows.push(WindowRow {
            trial: self.trial,
            step,
            mean_true_cost: self.true_sum / n,
            mean_shaped_cost: self.shaped_sum / n,
            destab_frac: self.destab as f64 / n,
        });
        self.count = 0;
        self.true_sum = 0.0;
        self.shaped_sum = 0.0;
        self.destab = 0;
    }

    pub fn finish(mut self, last_step: u64) -> Vec<WindowRow> {
        if self.count > 0 {
            self.flush(last_step);
        }
        self.rows
    }
}

pub fn trial_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("trial_{k:03}.csv"))
}

fn raw_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("trial_{k:03}_raw.csv"))
}

fn visits_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("trial_{k:03}_visits.csv"))
}

fn error_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("trial_{k:03}.err"))
}

pub fn write_window_csv(path: &Path, rows: &[WindowRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(WINDOW_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_grid_csv(path: &Path, grid: &[Vec<u64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["q1", "q2", "count"])?;
    for (a, row) in grid.iter().enumerate() {
        for (b, count) in row.iter().enumerate() {
            w.write_record([a.to_string(), b.to_string(), count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs trial `k` and writes its files. Returns the windowed rows.
pub fn run_trial(cfg: &ExperimentConfig, env: &EnvConfig, k: usize) -> Result<Vec<WindowRow>> {
    let mut windower = Windower::new(k, cfg.window);
    let mut raw = if cfg.raw {
        let file = BufWriter::new(File::create(raw_file(&cfg.out, k))?);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.write_record(["trial", "step", "true_cost", "shaped_cost", "action", "destabilizing"])?;
        Some(w)
    } else {
        None
    };
    let grid_max = cfg.visitation_max.filter(|_| env.num_queues() == 2);
    let grid_from = cfg.steps / 2;
    let mut visited: Vec<State> = Vec::new();
    let mut io_error: Option<Error> = None;

    train_observed(
        env,
        &cfg.method,
        cfg.steps,
        cfg.trial_seed(k),
        |view| {
            let row = view.row(k);
            windower.push(&row);
            if let Some(w) = raw.as_mut() {
                if let Err(e) = w.serialize(row) {
                    io_error.get_or_insert(e.into());
                }
            }
            if grid_max.is_some() && view.step > grid_from {
                visited.push(view.next_state.clone());
            }
        },
        |_| {},
    )?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if let Some(mut w) = raw {
        w.flush()?;
    }
    if let Some(max) = grid_max {
        write_grid_csv(&visits_file(&cfg.out, k), &visitation_grid(&visited, max))?;
    }
    let rows = windower.finish(cfg.steps);
    write_window_csv(&trial_file(&cfg.out, k), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out: PathBuf,
    pub completed: Vec<usize>,
    /// Failed trial indices with their error messages.
    pub failed: Vec<(usize, String)>,
}

/// Runs every trial of `cfg` concurrently. A failing trial leaves a
/// `trial_XXX.err` file and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let env = cfg.env_config()?;
    fs::create_dir_all(&cfg.out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(workers) = cfg.workers {
        builder = builder.num_threads(workers);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let outcomes: Vec<(usize, Result<Vec<WindowRow>>)> =
        pool.install(|| (0..cfg.trials).into_par_iter().map(|k| (k, run_trial(cfg, &env, k))).collect());

    let mut report = RunReport { out: cfg.out.clone(), completed: Vec::new(), failed: Vec::new() };
    for (k, outcome) in outcomes {
        let stale = error_file(&cfg.out, k);
        match outcome {
            Ok(_) => {
                if stale.exists() {
                    fs::remove_file(&stale)?;
                }
                log::info!("trial {k} done");
                report.completed.push(k);
            }
            Err(e) => {
                log::error!("trial {k} failed: {e}");
                let mut f = File::create(&stale)?;
                writeln!(f, "{e}")?;
                report.failed.push((k, e.to_string()));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, cost: f64, destab: u8) -> MetricsRow {
        MetricsRow { trial: 0, step, true_cost: cost, shaped_cost: 2.0 * cost, action: 0, destabilizing: destab }
    }

    #[test]
    fn windows_average_their_steps() {
        let mut w = Windower::new(0, 2);
        for (i, c) in [1.0, 3.0, 5.0, 7.0, 9.0].into_iter().enumerate() {
            w.push(&row(i as u64 + 1, c, u8::from(i % 2 == 0)));
        }
        let rows = w.finish(5);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].step, rows[0].mean_true_cost, rows[0].destab_frac), (2, 2.0, 0.5));
        assert_eq!((rows[1].step, rows[1].mean_shaped_cost), (4, 12.0));
        assert_eq!((rows[2].step, rows[2].mean_true_cost, rows[2].destab_frac), (5, 9.0, 1.0));
    }

    #[test]
    fn no_steps_no_rows() {
        assert!(Windower::new(0, 10).finish(0).is_empty());
    }
}
