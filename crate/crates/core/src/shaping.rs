//! Lyapunov energies and the shaped per-step cost.
//!
//! The shaped cost adds the one-step drift of `ℓ(s) = Σᵢ qᵢ^p` to a (possibly
//! transformed) optimality cost:
//!
//! ```text
//! l(s, a, s') = ℓ(s') − ℓ(s) + variant(c(s, a, s'))
//! ```
//!
//! Summed along a trajectory the drift telescopes to `ℓ(s_end) − ℓ(s_start)`,
//! which is what ties the long-run shaped objective to the true one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::environments::State;
use crate::{Error, Result};

/// Transformation applied to the true optimality cost before shaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    #[default]
    Identity,
    /// `−1/(c + 1)`
    Reciprocal,
    /// `−exp(−‖s'‖₂²)` over next-state queue coordinates.
    ExpNext,
}

impl FromStr for CostVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CostVariant::Identity),
            "reciprocal" => Ok(CostVariant::Reciprocal),
            "exp_next" => Ok(CostVariant::ExpNext),
            "exp_current" => Err(Error::Config(
                "cost variant `exp_current` is not supported (state-plus-action encoding is ambiguous)".into(),
            )),
            other => Err(Error::Config(format!("unknown cost variant `{other}`"))),
        }
    }
}

impl fmt::Display for CostVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostVariant::Identity => "identity",
            CostVariant::Reciprocal => "reciprocal",
            CostVariant::ExpNext => "exp_next",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingSpec {
    /// Lyapunov power.
    pub p: f64,
    pub cost_variant: CostVariant,
    pub enabled: bool,
}

impl Default for ShapingSpec {
    fn default() -> Self {
        Self { p: 2.0, cost_variant: CostVariant::Identity, enabled: true }
    }
}

impl ShapingSpec {
    pub fn new(p: f64, cost_variant: CostVariant, enabled: bool) -> Self {
        Self { p, cost_variant, enabled }
    }

    /// Optimality cost only.
    pub fn disabled() -> Self {
        Self { p: 1.0, cost_variant: CostVariant::Identity, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p > 0.0) {
            return Err(Error::Config(format!("lyapunov_p must be positive, got {}", self.p)));
        }
        if self.enabled && self.p == 1.0 && self.cost_variant == CostVariant::Identity {
            log::warn!(
                "linear Lyapunov drift is bounded in [-1, 1] and tends to be diluted by the raw \
                 queue-length cost; consider cost_variant = \"reciprocal\""
            );
        }
        Ok(())
    }
}

/// `ℓ(s) = Σᵢ qᵢ^p` over queue coordinates; flags carry no energy.
pub fn lyapunov_value(state: &State, p: f64) -> f64 {
    state.queues.iter().map(|&q| (q as f64).powf(p)).sum()
}

pub fn optimality_cost_variant(c: f64, _s: &State, s_next: &State, variant: CostVariant) -> f64 {
    match variant {
        CostVariant::Identity => c,
        CostVariant::Reciprocal => -1.0 / (c + 1.0),
        CostVariant::ExpNext => {
            let sq: f64 = s_next.queues.iter().map(|&q| (q as f64) * (q as f64)).sum();
            -(-sq).exp()
        }
    }
}

pub fn shaped_cost(s: &State, s_next: &State, c: f64, spec: &ShapingSpec) -> f64 {
    let base = optimality_cost_variant(c, s, s_next, spec.cost_variant);
    if spec.enabled {
        lyapunov_value(s_next, spec.p) - lyapunov_value(s, spec.p) + base
    } else {
        base
    }
}

/// One `(s, c, s')` record of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRecord {
    pub state: State,
    pub cost: f64,
    pub next: State,
}

/// Σₜ shaped cost along a consecutive trajectory.
pub fn telescoped_shaped_sum(trajectory: &[CostRecord], spec: &ShapingSpec) -> Result<f64> {
    for (t, pair) in trajectory.windows(2).enumerate() {
        if pair[0].next != pair[1].state {
            return Err(Error::Contract(format!(
                "trajectory is not consecutive between records {t} and {}",
                t + 1
            )));
        }
    }
    Ok(trajectory
        .iter()
        .map(|r| shaped_cost(&r.state, &r.next, r.cost, spec))
        .sum())
}
