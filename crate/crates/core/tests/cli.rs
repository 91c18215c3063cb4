use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stop_core::harness::aggregate::AGGREGATE_SEED;
use stop_core::harness::config::ExperimentConfig;
use stop_core::harness::run::{run_trial, trial_file};

fn stop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stop")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, body).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn missing_config_exits_one_with_usage() {
    let out = stop(&["run", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = stop(&["run", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "env = \"sa-medium\"\ntrials = 0\n");
    assert_eq!(stop(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn zero_steps_write_header_only_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "env = \"sa-medium\"\nsteps = 0\ntrials = 2\n[method]\nname = \"ppo\"\n");
    let res = stop(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    for k in 0..2 {
        let text = fs::read_to_string(trial_file(&out, k)).unwrap();
        assert_eq!(text, "trial,step,mean_true_cost,mean_shaped_cost,destab_frac\n");
    }
}

#[test]
fn default_run_has_one_hundred_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "env = \"sa-medium\"\ntrials = 1\n[method]\nname = \"stop\"\n");
    assert!(stop(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let rows = read_rows(&trial_file(&out, 0));
    assert_eq!(rows.len(), 100);
    assert_eq!(rows[99][1], "100000");
}

#[test]
fn windowed_means_match_raw_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(
        tmp.path(),
        "env = \"sa-high-faulty\"\nsteps = 1050\nwindow = 100\ntrials = 1\nraw = true\n[method]\nname = \"stop\"\n",
    );
    assert!(stop(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let raw = read_rows(&out.join("trial_000_raw.csv"));
    let windows = read_rows(&trial_file(&out, 0));
    assert_eq!(raw.len(), 1050);
    assert_eq!(windows.len(), 11);
    for (w, chunk) in windows.iter().zip(raw.chunks(100)) {
        let n = chunk.len() as f64;
        let col = |i: usize| chunk.iter().map(|r| r[i].parse::<f64>().unwrap()).sum::<f64>() / n;
        assert_eq!(w[1], chunk.last().unwrap()[1]);
        assert!((w[2].parse::<f64>().unwrap() - col(2)).abs() < 1e-9);
        assert!((w[3].parse::<f64>().unwrap() - col(3)).abs() < 1e-9);
        assert!((w[4].parse::<f64>().unwrap() - col(5)).abs() < 1e-12);
    }
}

#[test]
fn a_single_trial_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml_str("env = \"sa-medium\"\nsteps = 2000\nwindow = 250\ntrials = 3\n").unwrap();
    cfg.out = tmp.path().join("run");
    stop_core::harness::run_experiment(&cfg).unwrap();
    let path = trial_file(&cfg.out, 1);
    let before = fs::read(&path).unwrap();
    fs::remove_file(&path).unwrap();
    run_trial(&cfg, &cfg.env_config().unwrap(), 1).unwrap();
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn failing_trials_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    // an absurd learning rate drives the networks to non-finite values
    let cfg = write_config(
        tmp.path(),
        "env = \"sa-medium\"\nsteps = 2000\nwindow = 100\ntrials = 2\n[method]\nname = \"ppo\"\nlr = 1e300\n",
    );
    let res = stop(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    for k in 0..2 {
        assert!(out.join(format!("trial_{k:03}.err")).exists());
    }
}

#[test]
fn sweep_names_directories_by_value() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("sw");
    let cfg = write_config(
        tmp.path(),
        &format!("env = \"sa-medium\"\nsteps = 400\nwindow = 200\ntrials = 1\nout = {:?}\n[method]\nname = \"stop\"\n", base),
    );
    let res = stop(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "lyapunov_p", "--values", "1,2,3"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for v in ["1", "2", "3"] {
        assert!(trial_file(&tmp.path().join(format!("sw_p{v}")), 0).exists());
    }
    assert_eq!(stop(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "lr", "--values", "1"]).status.code(), Some(1));
}

#[test]
fn oracle_check_passes_at_cap_five() {
    let out = stop(&["oracle-check", "--cap", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS") && !text.contains("FAIL"));
}

#[test]
fn table1_writes_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t1.csv");
    assert!(stop(&["table1", "--out", path.to_str().unwrap()]).status.success());
    let rows = read_rows(&path);
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["true", "linear", "quadratic"]);
    let value = |i: usize| rows[i][1].parse::<f64>().unwrap();
    assert!(value(1) > value(0) && value(2) > value(0));
}

/// Straight sort/trim IQM for sample sizes divisible by four.
fn trimmed_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = v.len() / 4;
    v[q..v.len() - q].iter().sum::<f64>() / (v.len() - 2 * q) as f64
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

#[test]
fn aggregate_matches_an_independent_bootstrap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("method");
    fs::create_dir(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let values: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..10.0)).collect();
    for (k, v) in values.iter().enumerate() {
        fs::write(
            dir.join(format!("trial_{k:03}.csv")),
            format!("trial,step,mean_true_cost,mean_shaped_cost,destab_frac\n{k},100,{v},0,0\n"),
        )
        .unwrap();
    }
    let out = tmp.path().join("summary.csv");
    let res = stop(&["aggregate", "--in", dir.to_str().unwrap(), "--metric", "mean_true_cost", "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    let rows = read_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0][0].as_str(), rows[0][1].as_str(), rows[0][5].as_str()), ("method", "100", "20"));

    // trial files are read in name order, which is the generation order here
    let point = trimmed_mean(&values);
    let mut boot_rng = ChaCha8Rng::seed_from_u64(AGGREGATE_SEED);
    let mut stats: Vec<f64> = (0..2000)
        .map(|_| {
            let resample: Vec<f64> = (0..20).map(|_| values[boot_rng.random_range(0..20)]).collect();
            trimmed_mean(&resample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let lo = percentile(&stats, 0.025).min(point);
    let hi = percentile(&stats, 0.975).max(point);
    let field = |i: usize| rows[0][i].parse::<f64>().unwrap();
    assert!((field(2) - point).abs() < 1e-12);
    assert!((field(3) - lo).abs() < 1e-12, "{} vs {lo}", field(3));
    assert!((field(4) - hi).abs() < 1e-12, "{} vs {hi}", field(4));
}
