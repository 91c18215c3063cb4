//! Experiment config files (TOML).
//!
//! ```toml
//! env = "sa-medium"        # preset name, or an inline [env] table with `kind`
//! steps = 100000
//! trials = 20
//! seed = 0
//! window = 1000
//! out = "runs/stop"
//!
//! [method]
//! name = "stop"
//! lyapunov_p = 2.0
//! state_transform = "sl"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arppo::MethodConfig;
use crate::environments::{load_preset, EnvConfig};
use crate::{Error, Result};

pub const DEFAULT_STEPS: u64 = 100_000;
pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_WINDOW: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSpec {
    Preset(String),
    Inline(EnvConfig),
}

impl EnvSpec {
    pub fn resolve(&self) -> Result<EnvConfig> {
        let env = match self {
            EnvSpec::Preset(name) => load_preset(name)?,
            EnvSpec::Inline(env) => env.clone(),
        };
        env.validate()?;
        Ok(env)
    }
}

fn default_steps() -> u64 {
    DEFAULT_STEPS
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_window() -> u64 {
    DEFAULT_WINDOW
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Concurrent trials; defaults to the available parallelism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Also write unwindowed per-step rows.
    #[serde(default)]
    pub raw: bool,
    /// Export a visitation grid `0..=max` per trial (two-queue networks only),
    /// counted over the second half of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visitation_max: Option<u32>,
}

impl ExperimentConfig {
    /// Config with defaults for everything but the environment.
    pub fn new(env: EnvSpec, method: MethodConfig) -> Self {
        Self {
            env,
            method,
            steps: DEFAULT_STEPS,
            trials: DEFAULT_TRIALS,
            seed: 0,
            window: DEFAULT_WINDOW,
            out: default_out(),
            workers: None,
            raw: false,
            visitation_max: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.resolve()?;
        self.method.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if self.steps > 0 && self.window > self.steps {
            return Err(Error::Config(format!("window {} exceeds steps {}", self.window, self.steps)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        self.env.resolve()
    }

    /// Seed of trial `k`.
    pub fn trial_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(k as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::Method;
    use crate::transforms::TransformKind;

    #[test]
    fn parses_preset_config() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            env = "sa-medium"
            steps = 5000
            trials = 3
            seed = 7
            out = "x"

            [method]
            name = "stop"
            lyapunov_p = 3.0
            state_transform = "sig"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.steps, 5000);
        assert_eq!(cfg.window, DEFAULT_WINDOW);
        assert_eq!(cfg.method.name, Method::Stop);
        assert_eq!(cfg.method.transform(), TransformKind::SymSigmoid);
        assert_eq!(cfg.method.shaping().p, 3.0);
        assert_eq!(cfg.trial_seed(2), 9);
    }

    #[test]
    fn parses_inline_env() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            steps = 10
            window = 5
            [env]
            kind = "server_alloc"
            arrival_rates = [0.1]
            service_probs = [0.5]
            connect_probs = [1.0]
            [method]
            name = "maxweight"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.env_config().unwrap().num_queues(), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            "env = \"nope\"",
            "env = \"sa-medium\"\ntrials = 0",
            "env = \"sa-medium\"\nsteps = 10\nwindow = 20",
            "env = \"sa-medium\"\nbogus = 1",
            "env = \"sa-medium\"\n[method]\nname = \"stop\"\ncost_variant = \"exp_current\"",
            "steps = 10",
        ];
        for text in bad {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::new(EnvSpec::Preset("sa-medium".into()), MethodConfig::for_method(Method::Ppo));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
