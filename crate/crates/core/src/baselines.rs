//! Reference schedulers: MaxWeight, the cμ-rule, uniform random, and the
//! MaxWeight fallback used by PPO with training wheels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::environments::{Action, EnvConfig, State};
use crate::{Error, Result};

/// Policy selector for a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Average-reward PPO on the true cost with raw observations.
    Ppo,
    /// PPO with Lyapunov shaping and a state transformation.
    Stop,
    #[serde(rename = "maxweight")]
    MaxWeight,
    Cmu,
    Random,
    PpoTw,
}

impl Method {
    pub fn is_learner(self) -> bool {
        matches!(self, Method::Ppo | Method::Stop | Method::PpoTw)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Method::Ppo),
            "stop" => Ok(Method::Stop),
            "maxweight" => Ok(Method::MaxWeight),
            "cmu" => Ok(Method::Cmu),
            "random" => Ok(Method::Random),
            "ppo_tw" => Ok(Method::PpoTw),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ppo => "ppo",
            Method::Stop => "stop",
            Method::MaxWeight => "maxweight",
            Method::Cmu => "cmu",
            Method::Random => "random",
            Method::PpoTw => "ppo_tw",
        })
    }
}

/// First index attaining the maximum.
fn argmax_first(weights: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, w) in weights.enumerate() {
        if w > best.1 {
            best = (i, w);
        }
    }
    best.0
}

/// argmaxᵢ (flagᵢ or 1)·pᵢ·Qᵢ, lowest index on ties.
pub fn maxweight_action(state: &State, service_probs: &[f64], use_flags: bool) -> Action {
    let weights = state.queues.iter().zip(service_probs).enumerate().map(|(i, (&q, &p))| {
        let flag = if use_flags { state.flags.get(i).copied().unwrap_or(1) as f64 } else { 1.0 };
        flag * p * q as f64
    });
    Action(argmax_first(weights))
}

/// Among non-empty queues, argmaxᵢ costᵢ·rateᵢ; lowest index when all are empty.
pub fn cmu_action(state: &State, holding_costs: &[f64], service_rates: &[f64]) -> Action {
    if state.queues.iter().all(|&q| q == 0) {
        return Action(0);
    }
    let weights = state
        .queues
        .iter()
        .zip(holding_costs.iter().zip(service_rates))
        .map(|(&q, (&c, &mu))| if q > 0 { c * mu } else { f64::NEG_INFINITY });
    Action(argmax_first(weights))
}

/// Environment-aware MaxWeight. For the N-model the cμ-rule stands in, since
/// server 1 is not controlled and classical MaxWeight needs adapting there.
pub fn maxweight_for(env: &EnvConfig, state: &State) -> Action {
    match env {
        EnvConfig::ServerAlloc(c) => maxweight_action(state, &c.service_probs, true),
        EnvConfig::NModel(c) => cmu_action(state, &c.holding_costs, &[c.mu2, c.mu3]),
    }
}

/// cμ-rule with the environment's own costs and rates (unit holding costs for
/// server allocation, whose cost is the plain queue total).
pub fn cmu_for(env: &EnvConfig, state: &State) -> Action {
    match env {
        EnvConfig::ServerAlloc(c) => cmu_action(state, &vec![1.0; c.num_queues()], &c.service_probs),
        EnvConfig::NModel(c) => cmu_action(state, &c.holding_costs, &[c.mu2, c.mu3]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WheelsMode {
    Rl,
    Safe,
}

/// Hysteresis switch between the learner and MaxWeight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingWheelsState {
    pub mode: WheelsMode,
    pub upper: u32,
    pub lower: u32,
}

impl Default for TrainingWheelsState {
    fn default() -> Self {
        Self { mode: WheelsMode::Rl, upper: 100, lower: 50 }
    }
}

impl TrainingWheelsState {
    pub fn new(upper: u32, lower: u32) -> Result<Self> {
        if lower >= upper {
            return Err(Error::Config(format!("training-wheels thresholds need lower < upper, got {lower} / {upper}")));
        }
        Ok(Self { mode: WheelsMode::Rl, upper, lower })
    }

    /// Mode for `state`: engage above `upper`, release below `lower`.
    pub fn next_mode(&self, state: &State) -> WheelsMode {
        let max = state.max_queue();
        match self.mode {
            WheelsMode::Rl if max > self.upper => WheelsMode::Safe,
            WheelsMode::Safe if max < self.lower => WheelsMode::Rl,
            mode => mode,
        }
    }
}

/// Picks the acting policy for `state`. `rl_policy` is only called in RL
/// mode; the caller must keep safe-mode transitions out of its rollout buffer.
pub fn training_wheels_select<F>(
    rl_policy: F,
    state: &State,
    tw: TrainingWheelsState,
    env: &EnvConfig,
) -> (Action, TrainingWheelsState)
where
    F: FnOnce(&State) -> Action,
{
    let mode = tw.next_mode(state);
    let tw = TrainingWheelsState { mode, ..tw };
    let action = match mode {
        WheelsMode::Safe => maxweight_for(env, state),
        WheelsMode::Rl => rl_policy(state),
    };
    (action, tw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::load_preset;
    use proptest::prelude::*;

    #[test]
    fn maxweight_examples() {
        let p = [0.3, 0.8];
        assert_eq!(maxweight_action(&State::new(vec![5, 2], vec![1, 1]), &p, true), Action(1));
        assert_eq!(maxweight_action(&State::new(vec![5, 2], vec![1, 0]), &p, true), Action(0));
        assert_eq!(maxweight_action(&State::new(vec![0, 0], vec![1, 1]), &p, true), Action(0));
        assert_eq!(maxweight_action(&State::new(vec![5, 2], vec![1, 0]), &p, false), Action(1));
    }

    #[test]
    fn cmu_examples() {
        let mu = [0.3, 0.8];
        assert_eq!(cmu_action(&State::queues_only(vec![1, 1]), &[1.0, 1.0], &mu), Action(1));
        assert_eq!(cmu_action(&State::queues_only(vec![1, 0]), &[1.0, 1.0], &mu), Action(0));
        assert_eq!(cmu_action(&State::queues_only(vec![1, 1]), &[3.0, 1.0], &[0.9, 0.8]), Action(0));
        assert_eq!(cmu_action(&State::queues_only(vec![0, 0]), &[3.0, 1.0], &[0.9, 0.8]), Action(0));
    }

    #[test]
    fn nmodel_maxweight_is_cmu() {
        let env = load_preset("nmodel-veryhigh-2").unwrap();
        assert_eq!(maxweight_for(&env, &State::queues_only(vec![1, 4])), Action(0));
        assert_eq!(maxweight_for(&env, &State::queues_only(vec![0, 4])), Action(1));
    }

    #[test]
    fn training_wheels_hysteresis() {
        let env = load_preset("sa-medium").unwrap();
        let rl = |_: &State| Action(0);
        let tw = TrainingWheelsState::default();

        let s = State::new(vec![101, 3], vec![1, 1]);
        let (_, tw1) = training_wheels_select(rl, &s, tw, &env);
        assert_eq!(tw1.mode, WheelsMode::Safe);

        let s = State::new(vec![75, 0], vec![1, 1]);
        let (a, tw2) = training_wheels_select(|_: &State| Action(1), &s, tw1, &env);
        assert_eq!(tw2.mode, WheelsMode::Safe);
        assert_eq!(a, Action(0));

        let s = State::new(vec![49, 0], vec![1, 1]);
        let (a, tw3) = training_wheels_select(|_: &State| Action(1), &s, tw2, &env);
        assert_eq!(tw3.mode, WheelsMode::Rl);
        assert_eq!(a, Action(1));

        let s = State::new(vec![100, 0], vec![1, 1]);
        assert_eq!(training_wheels_select(rl, &s, tw3, &env).1.mode, WheelsMode::Rl);
        assert!(TrainingWheelsState::new(50, 50).is_err());
    }

    #[test]
    fn method_names() {
        for m in ["ppo", "stop", "maxweight", "cmu", "random", "ppo_tw"] {
            assert_eq!(m.parse::<Method>().unwrap().to_string(), m);
        }
        assert!("dqn".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn maxweight_never_picks_an_empty_queue(qs in prop::collection::vec(0u32..20, 2..6), seed in 0u64..1000) {
            let p: Vec<f64> = (0..qs.len()).map(|i| 0.1 + ((seed as usize + i * 7) % 9) as f64 / 10.0).collect();
            let flags = vec![1u8; qs.len()];
            let s = State::new(qs.clone(), flags);
            let a = maxweight_action(&s, &p, true);
            if qs.iter().any(|&q| q > 0) {
                prop_assert!(qs[a.0] > 0);
            }
            prop_assert_eq!(a, maxweight_action(&s, &p, true));
        }

        #[test]
        fn wheels_mode_only_changes_outside_band(max in 0u32..200, safe in any::<bool>()) {
            let tw = TrainingWheelsState { mode: if safe { WheelsMode::Safe } else { WheelsMode::Rl }, upper: 100, lower: 50 };
            let next = tw.next_mode(&State::queues_only(vec![max, 0]));
            if (50..=100).contains(&max) {
                prop_assert_eq!(next, tw.mode);
            }
        }
    }
}
