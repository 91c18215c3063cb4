//! Discrete-time queueing simulators.
//!
//! Two networks are provided:
//!
//! - **Server allocation**: one server picks one of `N` queues per step. Jobs
//!   arrive per queue as Bernoulli(λᵢ); the chosen queue releases a job only
//!   when the server is connected to it (flag drawn Bernoulli(cᵢ)) and service
//!   succeeds (Bernoulli(pᵢ)). The observed state is queue lengths plus flags.
//! - **N-model**: two buffers, two servers. Server 1 always works buffer 1,
//!   server 2 (the controlled one) works buffer 1 or buffer 2. The
//!   continuous-time chain is uniformized: each step samples exactly one event
//!   with probability proportional to its rate.
//!
//! Randomness is split into a sampling step producing an explicit outcome and
//! a pure transition applying it, so tests and the exact oracle can drive the
//! dynamics with chosen outcomes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{stream_rng, Error, Result, Stream};

pub const DEFAULT_INIT_MAX: u32 = 10;

/// Observed state: queue lengths plus 0/1 connectivity flags (empty for the
/// N-model).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct State {
    pub queues: Vec<u32>,
    pub flags: Vec<u8>,
}

impl State {
    pub fn new(queues: Vec<u32>, flags: Vec<u8>) -> Self {
        Self { queues, flags }
    }

    /// State without connectivity flags.
    pub fn queues_only(queues: Vec<u32>) -> Self {
        Self { queues, flags: Vec::new() }
    }

    /// ‖queues‖₁
    pub fn total(&self) -> u64 {
        self.queues.iter().map(|&q| q as u64).sum()
    }

    pub fn max_queue(&self) -> u32 {
        self.queues.iter().copied().max().unwrap_or(0)
    }

    /// Queue coordinates followed by flag coordinates, as reals.
    pub fn features(&self) -> impl Iterator<Item = f64> + '_ {
        self.queues
            .iter()
            .map(|&q| q as f64)
            .chain(self.flags.iter().map(|&f| f as f64))
    }

    pub fn dim(&self) -> usize {
        self.queues.len() + self.flags.len()
    }
}

/// Index of the queue (server allocation) or buffer (N-model) to serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action(pub usize);

fn default_init_max() -> u32 {
    DEFAULT_INIT_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerAllocConfig {
    pub arrival_rates: Vec<f64>,
    pub service_probs: Vec<f64>,
    pub connect_probs: Vec<f64>,
    /// Initial queue lengths are drawn uniformly from `0..=init_max`.
    #[serde(default = "default_init_max")]
    pub init_max: u32,
}

impl ServerAllocConfig {
    pub fn new(arrival_rates: Vec<f64>, service_probs: Vec<f64>, connect_probs: Vec<f64>) -> Self {
        Self { arrival_rates, service_probs, connect_probs, init_max: DEFAULT_INIT_MAX }
    }

    pub fn num_queues(&self) -> usize {
        self.arrival_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.arrival_rates.len();
        if n == 0 {
            return Err(Error::Config("server allocation needs at least one queue".into()));
        }
        if self.service_probs.len() != n || self.connect_probs.len() != n {
            return Err(Error::Config(format!(
                "rate vectors disagree in length: arrival {}, service {}, connect {}",
                n,
                self.service_probs.len(),
                self.connect_probs.len()
            )));
        }
        for (name, rates) in [
            ("arrival_rates", &self.arrival_rates),
            ("service_probs", &self.service_probs),
            ("connect_probs", &self.connect_probs),
        ] {
            if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::Config(format!("{name} entry {bad} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn default_holding_costs() -> [f64; 2] {
    [3.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NModelConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    #[serde(default = "default_holding_costs")]
    pub holding_costs: [f64; 2],
    #[serde(default = "default_init_max")]
    pub init_max: u32,
}

impl NModelConfig {
    pub fn new(lambda1: f64, lambda2: f64, mu1: f64, mu2: f64, mu3: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            mu1,
            mu2,
            mu3,
            holding_costs: default_holding_costs(),
            init_max: DEFAULT_INIT_MAX,
        }
    }

    /// Uniformization constant Λ.
    pub fn total_rate(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.mu1 + self.mu2 + self.mu3
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lambda1, self.lambda2, self.mu1, self.mu2, self.mu3];
        if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Config(format!("N-model rates must be positive, got {rates:?}")));
        }
        if self.holding_costs.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return Err(Error::Config("holding costs must be non-negative".into()));
        }
        Ok(())
    }

    /// Event probabilities in the order (λ₁, λ₂, μ₁, μ₂, μ₃).
    pub fn event_probs(&self) -> [f64; 5] {
        let total = self.total_rate();
        [self.lambda1, self.lambda2, self.mu1, self.mu2, self.mu3].map(|r| r / total)
    }
}

/// Either network, as read from a preset or an inline config table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    ServerAlloc(ServerAllocConfig),
    NModel(NModelConfig),
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::ServerAlloc(c) => c.validate(),
            EnvConfig::NModel(c) => c.validate(),
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            EnvConfig::ServerAlloc(c) => c.num_queues(),
            EnvConfig::NModel(_) => 2,
        }
    }

    pub fn num_queues(&self) -> usize {
        self.num_actions()
    }

    /// Width of the observation vector fed to the networks.
    pub fn obs_dim(&self) -> usize {
        match self {
            EnvConfig::ServerAlloc(c) => 2 * c.num_queues(),
            EnvConfig::NModel(_) => 2,
        }
    }

    pub fn init_max(&self) -> u32 {
        match self {
            EnvConfig::ServerAlloc(c) => c.init_max,
            EnvConfig::NModel(c) => c.init_max,
        }
    }

    /// Draws a start state: queues uniform on `0..=init_max`, flags Bernoulli(cᵢ).
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let init_max = self.init_max();
        let queues = (0..self.num_queues()).map(|_| rng.random_range(0..=init_max)).collect();
        let flags = match self {
            EnvConfig::ServerAlloc(c) => sample_flags(c, rng),
            EnvConfig::NModel(_) => Vec::new(),
        };
        State { queues, flags }
    }

    /// One transition from `state` under `action`. Returns the next state and
    /// the true cost, which depends on the next state only.
    pub fn step<R: Rng + ?Sized>(&self, state: &State, action: Action, rng: &mut R) -> Result<(State, f64)> {
        match self {
            EnvConfig::ServerAlloc(c) => server_alloc_step(c, state, action, rng),
            EnvConfig::NModel(c) => nmodel_step(state, action, c, rng),
        }
    }

    /// True cost of landing in `next`.
    pub fn cost(&self, next: &State) -> f64 {
        match self {
            EnvConfig::ServerAlloc(_) => next.total() as f64,
            EnvConfig::NModel(c) => nmodel_cost(c, next),
        }
    }
}

fn sample_flags<R: Rng + ?Sized>(config: &ServerAllocConfig, rng: &mut R) -> Vec<u8> {
    config
        .connect_probs
        .iter()
        .map(|&c| u8::from(rng.random::<f64>() < c))
        .collect()
}

/// Seeded start state for the server-allocation network.
pub fn server_alloc_reset(config: &ServerAllocConfig, seed: u64) -> Result<State> {
    config.validate()?;
    let mut rng = stream_rng(seed, Stream::Environment);
    Ok(EnvConfig::ServerAlloc(config.clone()).initial_state(&mut rng))
}

/// Random outcome of one server-allocation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerAllocOutcome {
    /// Service attempt succeeded (Bernoulli(p_a) for the chosen queue).
    pub service_success: bool,
    pub arrivals: Vec<bool>,
    /// Connectivity flags of the next state.
    pub next_flags: Vec<u8>,
}

/// Samples an outcome. The number of draws does not depend on the action or
/// the state, so the stream stays aligned across policies.
pub fn sample_server_alloc_outcome<R: Rng + ?Sized>(
    config: &ServerAllocConfig,
    action: Action,
    rng: &mut R,
) -> ServerAllocOutcome {
    let service_success = rng.random::<f64>() < config.service_probs[action.0];
    let arrivals = config.arrival_rates.iter().map(|&l| rng.random::<f64>() < l).collect();
    let next_flags = sample_flags(config, rng);
    ServerAllocOutcome { service_success, arrivals, next_flags }
}

/// Applies an outcome: departure first (needs connection, success and a
/// waiting job), then arrivals, then the fresh flags.
pub fn apply_server_alloc(state: &State, action: Action, outcome: &ServerAllocOutcome) -> State {
    let mut queues = state.queues.clone();
    let a = action.0;
    if state.flags[a] == 1 && outcome.service_success && queues[a] > 0 {
        queues[a] -= 1;
    }
    for (q, &arrived) in queues.iter_mut().zip(&outcome.arrivals) {
        *q += u32::from(arrived);
    }
    State { queues, flags: outcome.next_flags.clone() }
}

fn check_server_alloc_input(config: &ServerAllocConfig, state: &State, action: Action) -> Result<()> {
    let n = config.num_queues();
    if action.0 >= n {
        return Err(Error::Contract(format!("action {} out of range for {n} queues", action.0)));
    }
    if state.queues.len() != n || state.flags.len() != n {
        return Err(Error::Contract(format!(
            "state has {} queues / {} flags, network has {n}",
            state.queues.len(),
            state.flags.len()
        )));
    }
    Ok(())
}

pub fn server_alloc_step<R: Rng + ?Sized>(
    config: &ServerAllocConfig,
    state: &State,
    action: Action,
    rng: &mut R,
) -> Result<(State, f64)> {
    check_server_alloc_input(config, state, action)?;
    let outcome = sample_server_alloc_outcome(config, action, rng);
    let next = apply_server_alloc(state, action, &outcome);
    let cost = next.total() as f64;
    Ok((next, cost))
}

/// The single event of a uniformized N-model step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NModelEvent {
    Arrival1,
    Arrival2,
    /// Server 1 completes a buffer-1 job.
    Service1,
    /// Server 2 completes a buffer-1 job.
    Service2,
    /// Server 2 completes a buffer-2 job.
    Service3,
}

impl NModelEvent {
    pub const ALL: [NModelEvent; 5] = [
        NModelEvent::Arrival1,
        NModelEvent::Arrival2,
        NModelEvent::Service1,
        NModelEvent::Service2,
        NModelEvent::Service3,
    ];
}

pub fn sample_nmodel_event<R: Rng + ?Sized>(config: &NModelConfig, rng: &mut R) -> NModelEvent {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (event, p) in NModelEvent::ALL.into_iter().zip(config.event_probs()) {
        acc += p;
        if u < acc {
            return event;
        }
    }
    NModelEvent::Service3
}

/// Applies an event; ineffective events leave the state unchanged.
pub fn apply_nmodel(state: &State, action: Action, event: NModelEvent) -> State {
    let mut queues = state.queues.clone();
    match event {
        NModelEvent::Arrival1 => queues[0] += 1,
        NModelEvent::Arrival2 => queues[1] += 1,
        NModelEvent::Service1 => queues[0] = queues[0].saturating_sub(1),
        NModelEvent::Service2 if action.0 == 0 => queues[0] = queues[0].saturating_sub(1),
        NModelEvent::Service3 if action.0 == 1 => queues[1] = queues[1].saturating_sub(1),
        _ => {}
    }
    State { queues, flags: Vec::new() }
}

pub fn nmodel_cost(config: &NModelConfig, next: &State) -> f64 {
    config.holding_costs[0] * next.queues[0] as f64 + config.holding_costs[1] * next.queues[1] as f64
}

pub fn nmodel_step<R: Rng + ?Sized>(
    state: &State,
    action: Action,
    config: &NModelConfig,
    rng: &mut R,
) -> Result<(State, f64)> {
    if action.0 > 1 {
        return Err(Error::Contract(format!("N-model action must be 0 or 1, got {}", action.0)));
    }
    if state.queues.len() != 2 {
        return Err(Error::Contract(format!("N-model state needs 2 buffers, got {}", state.queues.len())));
    }
    let event = sample_nmodel_event(config, rng);
    let next = apply_nmodel(state, action, event);
    let cost = nmodel_cost(config, &next);
    Ok((next, cost))
}

/// Σᵢ λᵢ/pᵢ < 1 − Πᵢ(1−cᵢ) and λᵢ/pᵢ < cᵢ for every queue.
pub fn stabilizability_check(config: &ServerAllocConfig) -> Result<bool> {
    config.validate()?;
    if let Some(i) = config.service_probs.iter().position(|&p| p == 0.0) {
        return Err(Error::Config(format!("service probability of queue {i} is zero")));
    }
    let loads: Vec<f64> = config
        .arrival_rates
        .iter()
        .zip(&config.service_probs)
        .map(|(l, p)| l / p)
        .collect();
    let all_disconnected: f64 = config.connect_probs.iter().map(|c| 1.0 - c).product();
    let total_ok = loads.iter().sum::<f64>() < 1.0 - all_disconnected;
    let each_ok = loads.iter().zip(&config.connect_probs).all(|(load, c)| load < c);
    Ok(total_ok && each_ok)
}

pub const PRESET_NAMES: [&str; 5] =
    ["sa-medium", "sa-high-faulty", "sa-veryhigh-faulty", "sa-10queue", "nmodel-veryhigh-2"];

pub fn load_preset(name: &str) -> Result<EnvConfig> {
    let two_queue = |c: [f64; 2]| {
        EnvConfig::ServerAlloc(ServerAllocConfig::new(vec![0.2, 0.1], vec![0.3, 0.8], c.to_vec()))
    };
    let config = match name {
        "sa-medium" => two_queue([1.0, 1.0]),
        "sa-high-faulty" => two_queue([0.95, 0.5]),
        "sa-veryhigh-faulty" => two_queue([0.7, 0.5]),
        "sa-10queue" => EnvConfig::ServerAlloc(ServerAllocConfig::new(
            vec![0.05, 0.01, 0.2, 0.4, 0.05, 0.01, 0.02, 0.01, 0.015, 0.01],
            vec![0.9, 0.85, 0.95, 0.75, 0.9, 0.9, 0.85, 0.9, 0.9, 0.85],
            vec![1.0; 10],
        )),
        "nmodel-veryhigh-2" => EnvConfig::NModel(NModelConfig::new(0.9, 0.8, 1.0, 0.9, 0.8)),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(config)
}

/// A simulator instance: config, current state and its own random stream.
/// Never reset after construction.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    state: State,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Environment);
        let state = config.initial_state(&mut rng);
        Ok(Self { config, state, rng })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    /// Advances one step and returns (next state, true cost).
    pub fn step(&mut self, action: Action) -> Result<(State, f64)> {
        let (next, cost) = self.config.step(&self.state, action, &mut self.rng)?;
        self.state = next.clone();
        Ok((next, cost))
    }
}
