//! Normalized advantages of destabilizing actions before any learning.
//!
//! A uniformly random agent fills one rollout buffer; advantages are computed
//! with a freshly initialized critic under the true cost and under linear and
//! quadratic Lyapunov shaping. Each trial contributes the mean normalized
//! advantage over its destabilizing slots (cost convention: positive means the
//! action is discouraged).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::arppo::{estimate_advantages, RolloutBuffer, Slot};
use crate::diagnostics::unstable_advantage_stats;
use crate::environments::{Action, Env, EnvConfig};
use crate::harness::aggregate::summarize;
use crate::policy_net::MlpParams;
use crate::shaping::{shaped_cost, CostVariant, ShapingSpec};
use crate::transforms::{transform_state, TransformKind};
use crate::{stream_rng, Result, Stream};

pub const TABLE1_TRIALS: usize = 20;
pub const TABLE1_BUFFER: usize = 128;
const GAE_LAMBDA: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table1Setting {
    pub label: &'static str,
    pub shaping: ShapingSpec,
}

pub fn table1_settings() -> [Table1Setting; 3] {
    [
        Table1Setting { label: "true", shaping: ShapingSpec::disabled() },
        Table1Setting { label: "linear", shaping: ShapingSpec::new(1.0, CostVariant::Identity, true) },
        Table1Setting { label: "quadratic", shaping: ShapingSpec::new(2.0, CostVariant::Identity, true) },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub setting: String,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Trials that contained at least one destabilizing slot.
    pub n_trials: usize,
}

/// Per-setting trial means for one trial (`None` when the buffer held no
/// destabilizing action).
pub fn table1_trial(env: &EnvConfig, buffer_len: usize, seed: u64) -> Result<Vec<Option<f64>>> {
    let mut sim = Env::new(env.clone(), seed)?;
    let mut agent_rng = stream_rng(seed, Stream::Agent);
    let mut init_rng = stream_rng(seed, Stream::Init);
    let critic = MlpParams::critic(env.obs_dim(), &mut init_rng)?;
    let n_actions = env.num_actions();
    let logprob = -(n_actions as f64).ln();
    let kind = TransformKind::Identity;
    let settings = table1_settings();
    let mut buffers: Vec<RolloutBuffer> = settings.iter().map(|_| RolloutBuffer::new(buffer_len)).collect();

    for _ in 0..buffer_len {
        let state = sim.state().clone();
        let action = agent_rng.random_range(0..n_actions);
        let (next, cost) = sim.step(Action(action))?;
        let (obs, next_obs) = (transform_state(kind, &state), transform_state(kind, &next));
        for (buffer, setting) in buffers.iter_mut().zip(&settings) {
            let shaped = shaped_cost(&state, &next, cost, &setting.shaping);
            buffer.push(Slot::new(state.clone(), obs.clone(), action, logprob, shaped, cost, next.clone(), next_obs.clone()));
        }
    }

    buffers
        .iter()
        .map(|buffer| {
            let eta = buffer.mean_shaped_cost();
            let adv = estimate_advantages(buffer, &critic, eta, GAE_LAMBDA)?;
            unstable_advantage_stats(buffer, &adv.advantages)
        })
        .collect()
}

/// Runs the protocol over `trials` seeds (`seed + k`) and summarizes each
/// setting with the IQM and a bootstrap interval.
pub fn table1(env: &EnvConfig, trials: usize, buffer_len: usize, seed: u64) -> Result<Vec<Table1Row>> {
    env.validate()?;
    let per_trial: Vec<Vec<Option<f64>>> = (0..trials)
        .into_par_iter()
        .map(|k| table1_trial(env, buffer_len, seed.wrapping_add(k as u64)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    table1_settings()
        .iter()
        .enumerate()
        .map(|(i, setting)| {
            let values: Vec<f64> = per_trial.iter().filter_map(|t| t[i]).collect();
            let (iqm, ci_low, ci_high) = if values.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let s = summarize(&values, &mut rng)?;
                (s.iqm, s.ci_low, s.ci_high)
            };
            Ok(Table1Row { setting: setting.label.to_string(), iqm, ci_low, ci_high, n_trials: values.len() })
        })
        .collect()
}

pub fn write_table1_csv(path: &std::path::Path, rows: &[Table1Row]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
