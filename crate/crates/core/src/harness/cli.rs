//! `stop` command line. Exit codes: 0 success, 1 usage or config error,
//! 2 runtime failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand};

use crate::environments::{load_preset, PRESET_NAMES};
use crate::harness::aggregate::{aggregate, write_summary_csv};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::run_experiment;
use crate::harness::table1::{table1, write_table1_csv, TABLE1_BUFFER, TABLE1_TRIALS};
use crate::oracle::consistency_table;
use crate::shaping::ShapingSpec;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const ORACLE_TOL: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "stop", version, about = "Stability-shaped average-reward PPO for queueing networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every trial of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Also write per-step rows.
        #[arg(long)]
        raw: bool,
    },
    /// IQM and bootstrap interval across trials, per window and run directory.
    Aggregate {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "mean_true_cost")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized advantages of destabilizing actions for a random agent.
    Table1 {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sa-medium")]
        env: String,
        #[arg(long, default_value_t = TABLE1_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = TABLE1_BUFFER)]
        buffer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact shaped vs true average cost on truncated chains.
    OracleCheck {
        #[arg(long, default_value_t = 10)]
        cap: u32,
        /// Presets to check; defaults to every preset small enough to enumerate.
        #[arg(long)]
        env: Vec<String>,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// One run per value of a method parameter, written to `{out}_p{value}`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(parsed.command, &mut stdout) {
        Ok(code) => code,
        Err(e) if e.is_config() => {
            eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Run { config, seed, out: dir, workers, raw } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = dir {
                cfg.out = dir;
            }
            if workers.is_some() {
                cfg.workers = workers;
            }
            cfg.raw |= raw;
            run_and_report(&cfg, out)
        }
        Command::Aggregate { inputs, metric, out: path } => {
            let rows = aggregate(&inputs, &metric)?;
            write_summary_csv(&path, &rows)?;
            writeln!(out, "wrote {} rows to {}", rows.len(), path.display())?;
            Ok(EXIT_OK)
        }
        Command::Table1 { out: path, env, trials, buffer, seed } => {
            if trials == 0 || buffer == 0 {
                return Err(Error::Config("trials and buffer must be positive".into()));
            }
            let rows = table1(&load_preset(&env)?, trials, buffer, seed)?;
            write_table1_csv(&path, &rows)?;
            writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>7}", "setting", "iqm", "ci_low", "ci_high", "trials")?;
            for r in &rows {
                writeln!(out, "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>7}", r.setting, r.iqm, r.ci_low, r.ci_high, r.n_trials)?;
            }
            Ok(EXIT_OK)
        }
        Command::OracleCheck { cap, env, p } => oracle_check(cap, &env, p, out),
        Command::Sweep { config, param, values } => {
            if param != "lyapunov_p" {
                return Err(Error::Config(format!("cannot sweep `{param}`; supported: lyapunov_p")));
            }
            if values.is_empty() {
                return Err(Error::Config("no sweep values".into()));
            }
            let base = ExperimentConfig::from_file(&config)?;
            let configs: Vec<ExperimentConfig> = values
                .iter()
                .map(|&v| {
                    let mut cfg = base.clone();
                    cfg.method.lyapunov_p = v;
                    cfg.out = sweep_dir(&base.out, v);
                    cfg.validate().map(|_| cfg)
                })
                .collect::<Result<_>>()?;
            let mut code = EXIT_OK;
            for cfg in &configs {
                code = code.max(run_and_report(cfg, out)?);
            }
            Ok(code)
        }
    }
}

/// Output directory of one sweep point: `{out}_p{value}`.
pub fn sweep_dir(out: &std::path::Path, value: f64) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(format!("_p{value}"));
    PathBuf::from(name)
}

fn run_and_report(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<i32> {
    let report = run_experiment(cfg)?;
    writeln!(
        out,
        "{}: {} trials completed, {} failed",
        report.out.display(),
        report.completed.len(),
        report.failed.len()
    )?;
    for (k, msg) in &report.failed {
        writeln!(out, "  trial {k}: {msg}")?;
    }
    Ok(if report.failed.is_empty() { EXIT_OK } else { EXIT_RUNTIME })
}

fn oracle_check(cap: u32, envs: &[String], p: f64, out: &mut dyn Write) -> Result<i32> {
    let names: Vec<String> = if envs.is_empty() {
        PRESET_NAMES.iter().filter(|n| **n != "sa-10queue").map(|n| n.to_string()).collect()
    } else {
        envs.to_vec()
    };
    let spec = ShapingSpec { p, ..ShapingSpec::default() };
    spec.validate()?;
    let mut all_pass = true;
    writeln!(out, "{:<20} {:<16} {:>14} {:>14} {:>10} result", "env", "policy", "J_true", "J_shaped", "|diff|")?;
    for name in &names {
        let env = load_preset(name)?;
        let (rows, same_order) = consistency_table(name, &env, cap, spec, ORACLE_TOL)?;
        for r in &rows {
            all_pass &= r.pass;
            writeln!(
                out,
                "{:<20} {:<16} {:>14.8} {:>14.8} {:>10.2e} {}",
                r.env,
                r.policy.to_string(),
                r.j_true,
                r.j_shaped,
                (r.j_true - r.j_shaped).abs(),
                if r.pass { "PASS" } else { "FAIL" }
            )?;
        }
        all_pass &= same_order;
        writeln!(out, "{:<20} {:<16} {}", name, "ordering", if same_order { "PASS" } else { "FAIL" })?;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_RUNTIME })
}
