//! Average-reward PPO.
//!
//! One never-reset interaction loop fills a fixed-length rollout buffer, then
//! the learner:
//!
//! 1. sets the average-cost estimate `eta` from the buffer,
//! 2. computes differential TD errors `δₜ = −(lₜ − eta) + V(σ(sₜ₊₁)) − V(σ(sₜ))`
//!    and accumulates them with GAE (γ = 1),
//! 3. divides the advantages by their buffer standard deviation,
//! 4. runs clipped-surrogate epochs over shuffled minibatches.
//!
//! Costs are negated into rewards inside the learner only; every number
//! leaving this module is a cost.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{cmu_for, maxweight_for, training_wheels_select, Method, TrainingWheelsState, WheelsMode};
use crate::diagnostics::is_destabilizing;
use crate::environments::{Action, Env, EnvConfig, State};
use crate::policy_net::{adam_step, categorical_sample, log_softmax, AdamState, MlpParams, DEFAULT_LR};
use crate::shaping::{shaped_cost, CostVariant, ShapingSpec};
use crate::transforms::{transform_state, TransformKind};
use crate::{stream_rng, Error, Result, Stream};

pub const DEFAULT_ROLLOUT_LEN: usize = 200;

/// One transition as stored for learning.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub state: State,
    pub obs: Vec<f64>,
    pub action: usize,
    /// Behaviour log-probability of `action`.
    pub logprob: f64,
    pub shaped_cost: f64,
    pub true_cost: f64,
    pub next_state: State,
    pub next_obs: Vec<f64>,
    pub destabilizing: bool,
    /// The following slot does not continue from `next_state` (steps taken by
    /// another controller were skipped).
    pub gap_after: bool,
}

impl Slot {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state: State,
        obs: Vec<f64>,
        action: usize,
        logprob: f64,
        shaped_cost: f64,
        true_cost: f64,
        next_state: State,
        next_obs: Vec<f64>,
    ) -> Self {
        let destabilizing = is_destabilizing(&state, Action(action));
        Self {
            state,
            obs,
            action,
            logprob,
            shaped_cost,
            true_cost,
            next_state,
            next_obs,
            destabilizing,
            gap_after: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    capacity: usize,
    slots: Vec<Slot>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, slots: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn push(&mut self, slot: Slot) {
        debug_assert!(!self.is_full());
        self.slots.push(slot);
    }

    /// Marks the last stored slot as not continuing into the next one.
    pub fn mark_gap(&mut self) {
        if let Some(last) = self.slots.last_mut() {
            last.gap_after = true;
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    pub fn mean_shaped_cost(&self) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        self.slots.iter().map(|s| s.shaped_cost).sum::<f64>() / self.slots.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoHyper {
    pub clip: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub vf_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gae_lambda: 0.95,
            epochs: 4,
            minibatches: 4,
            vf_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("clip must be in (0, 1), got {}", self.clip)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda)));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config("epochs and minibatches must be positive".into()));
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

/// How `eta` follows the buffer's mean shaped cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRule {
    #[default]
    BufferMean,
    Ema,
}

/// Running estimate of the long-run (shaped) cost.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AvgCostEstimate {
    pub eta: f64,
    pub updates: u64,
}

pub fn update_eta(buffer: &RolloutBuffer, est: AvgCostEstimate, rule: EtaRule, ema_rate: f64) -> AvgCostEstimate {
    let mean = buffer.mean_shaped_cost();
    let eta = match rule {
        EtaRule::BufferMean => mean,
        EtaRule::Ema if est.updates == 0 => mean,
        EtaRule::Ema => est.eta + ema_rate * (mean - est.eta),
    };
    AvgCostEstimate { eta, updates: est.updates + 1 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    /// Std-normalized, reward convention (positive = better than average).
    pub advantages: Vec<f64>,
    pub raw_advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

pub fn estimate_advantages(
    buffer: &RolloutBuffer,
    critic: &MlpParams,
    eta: f64,
    gae_lambda: f64,
) -> Result<AdvantageEstimate> {
    let n = buffer.len();
    let mut values = Vec::with_capacity(n);
    let mut next_values = Vec::with_capacity(n);
    for slot in buffer.slots() {
        values.push(critic.forward(&slot.obs)?[0]);
        next_values.push(critic.forward(&slot.next_obs)?[0]);
    }
    let mut raw = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let slot = &buffer.slots()[t];
        if slot.gap_after {
            carry = 0.0;
        }
        let delta = -(slot.shaped_cost - eta) + next_values[t] - values[t];
        carry = delta + gae_lambda * carry;
        raw[t] = carry;
    }
    let value_targets: Vec<f64> = raw.iter().zip(&values).map(|(a, v)| a + v).collect();
    let advantages = match sample_std(&raw) {
        Some(sd) if sd > 0.0 && sd.is_finite() => raw.iter().map(|a| a / sd).collect(),
        _ => raw.clone(),
    };
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Training("non-finite advantage estimate".into()));
    }
    Ok(AdvantageEstimate { advantages, raw_advantages: raw, value_targets })
}

/// Unbiased standard deviation; `None` below two samples.
fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    Some(var.sqrt())
}

/// Separate policy and critic networks with their optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub policy: MlpParams,
    pub critic: MlpParams,
    pub policy_opt: AdamState,
    pub critic_opt: AdamState,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, actions: usize, lr: f64, betas: (f64, f64), rng: &mut R) -> Result<Self> {
        let policy = MlpParams::policy(obs_dim, actions, rng)?;
        let critic = MlpParams::critic(obs_dim, rng)?;
        Ok(Self::from_nets(policy, critic, lr, betas))
    }

    pub fn from_nets(policy: MlpParams, critic: MlpParams, lr: f64, betas: (f64, f64)) -> Self {
        let policy_opt = AdamState::new(policy.params().len(), lr, betas.0, betas.1);
        let critic_opt = AdamState::new(critic.params().len(), lr, betas.0, betas.1);
        Self { policy, critic, policy_opt, critic_opt }
    }

    /// Samples an action for an observation; returns `(action, log-prob)`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(usize, f64)> {
        let logits = self.policy.forward(obs)?;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Training("policy produced non-finite logits".into()));
        }
        Ok(categorical_sample(&logits, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
}

/// PPO loss over `indices`; when `grads` is given, accumulates the gradient of
/// the total loss for the policy and critic parameters.
pub fn ppo_loss(
    agent: &ActorCritic,
    buffer: &RolloutBuffer,
    est: &AdvantageEstimate,
    indices: &[usize],
    hyper: &PpoHyper,
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<LossParts> {
    let b = indices.len() as f64;
    let mut parts = LossParts::default();
    let mut clipped = 0usize;
    for &i in indices {
        let slot = &buffer.slots()[i];
        let adv = est.advantages[i];

        let trace = agent.policy.trace(&slot.obs)?;
        let logp = log_softmax(trace.output());
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let entropy: f64 = -probs
            .iter()
            .zip(&logp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>();
        let ratio = (logp[slot.action] - slot.logprob).exp();
        let unclipped = -adv * ratio;
        let clipped_obj = -adv * ratio.clamp(1.0 - hyper.clip, 1.0 + hyper.clip);
        let pg = unclipped.max(clipped_obj);
        if (ratio - 1.0).abs() > hyper.clip {
            clipped += 1;
        }

        let trace_v = agent.critic.trace(&slot.obs)?;
        let v = trace_v.output()[0];
        let err = v - est.value_targets[i];

        parts.policy_loss += pg / b;
        parts.entropy += entropy / b;
        parts.value_loss += 0.5 * err * err / b;

        if let Some((gp, gc)) = grads.as_mut() {
            // d pg / d logπ(a): ratio·(−A) on the unclipped branch, zero when the clip is active
            let d_logp = if unclipped >= clipped_obj { -adv * ratio } else { 0.0 };
            let glogits: Vec<f64> = probs
                .iter()
                .zip(&logp)
                .enumerate()
                .map(|(j, (&p, &lp))| {
                    let onehot = if j == slot.action { 1.0 } else { 0.0 };
                    let d_entropy = if p > 0.0 { -p * (lp + entropy) } else { 0.0 };
                    (d_logp * (onehot - p) - hyper.entropy_coef * d_entropy) / b
                })
                .collect();
            agent.policy.backward_into(&trace, &glogits, gp)?;
            agent.critic.backward_into(&trace_v, &[hyper.vf_coef * err / b], gc)?;
        }
    }
    parts.total = parts.policy_loss - hyper.entropy_coef * parts.entropy + hyper.vf_coef * parts.value_loss;
    parts.clip_fraction = clipped as f64 / b;
    if !parts.total.is_finite() {
        return Err(Error::Training(format!("non-finite PPO loss {parts:?}")));
    }
    Ok(parts)
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn even_chunks(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let parts = parts.clamp(1, items.len().max(1));
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// Scales both gradient vectors so their joint L2 norm is at most `max_norm`.
fn clip_global_norm(gp: &mut [f64], gc: &mut [f64], max_norm: f64) -> f64 {
    let norm = gp.iter().chain(gc.iter()).map(|g| g * g).sum::<f64>().sqrt();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        gp.iter_mut().chain(gc.iter_mut()).for_each(|g| *g *= coef);
    }
    norm
}

/// Clipped-surrogate epochs over shuffled minibatches. Returns the mean loss
/// parts over all minibatch steps.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut ActorCritic,
    buffer: &RolloutBuffer,
    est: &AdvantageEstimate,
    hyper: &PpoHyper,
    rng: &mut R,
) -> Result<LossParts> {
    let n = buffer.len();
    if n == 0 || est.advantages.len() != n || est.value_targets.len() != n {
        return Err(Error::Contract("advantages do not match the buffer".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut gp = vec![0.0; agent.policy.params().len()];
    let mut gc = vec![0.0; agent.critic.params().len()];
    let mut mean = LossParts::default();
    let mut steps = 0.0;
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in even_chunks(&order, hyper.minibatches) {
            gp.iter_mut().for_each(|g| *g = 0.0);
            gc.iter_mut().for_each(|g| *g = 0.0);
            let parts = ppo_loss(agent, buffer, est, chunk, hyper, Some((&mut gp, &mut gc)))?;
            clip_global_norm(&mut gp, &mut gc, hyper.max_grad_norm);
            adam_step(agent.policy.params_mut(), &gp, &mut agent.policy_opt)?;
            adam_step(agent.critic.params_mut(), &gc, &mut agent.critic_opt)?;
            mean.policy_loss += parts.policy_loss;
            mean.value_loss += parts.value_loss;
            mean.entropy += parts.entropy;
            mean.total += parts.total;
            mean.clip_fraction += parts.clip_fraction;
            steps += 1.0;
        }
    }
    mean.policy_loss /= steps;
    mean.value_loss /= steps;
    mean.entropy /= steps;
    mean.total /= steps;
    mean.clip_fraction /= steps;
    Ok(mean)
}

/// Steps `env` under the agent until `buffer` is full. Costs use raw states;
/// the agent sees transformed ones.
pub fn collect_rollout<R: Rng + ?Sized>(
    env: &mut Env,
    agent: &ActorCritic,
    spec: &ShapingSpec,
    kind: TransformKind,
    buffer: &mut RolloutBuffer,
    rng: &mut R,
) -> Result<()> {
    if !buffer.is_empty() {
        return Err(Error::Contract("collect_rollout needs an empty buffer".into()));
    }
    let mut obs = transform_state(kind, env.state());
    while !buffer.is_full() {
        let state = env.state().clone();
        let (action, logprob) = agent.act(&obs, rng)?;
        let (next, cost) = env.step(Action(action))?;
        let next_obs = transform_state(kind, &next);
        let shaped = shaped_cost(&state, &next, cost, spec);
        buffer.push(Slot::new(state, obs, action, logprob, shaped, cost, next, next_obs.clone()));
        obs = next_obs;
    }
    Ok(())
}

/// Method configuration: policy selector plus learner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    /// Defaults to on for `stop`, off otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shaping_enabled: Option<bool>,
    pub lyapunov_p: f64,
    pub cost_variant: CostVariant,
    /// Defaults to `sl` for `stop`, `id` otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_transform: Option<TransformKind>,
    pub rollout_len: usize,
    pub lr: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub eta_rule: EtaRule,
    pub eta_ema_rate: f64,
    pub tw_upper: u32,
    pub tw_lower: u32,
}

impl Default for MethodConfig {
    fn default() -> Self {
        let h = PpoHyper::default();
        Self {
            name: Method::Stop,
            shaping_enabled: None,
            lyapunov_p: 2.0,
            cost_variant: CostVariant::Identity,
            state_transform: None,
            rollout_len: DEFAULT_ROLLOUT_LEN,
            lr: DEFAULT_LR,
            clip: h.clip,
            gae_lambda: h.gae_lambda,
            epochs: h.epochs,
            minibatches: h.minibatches,
            entropy_coef: h.entropy_coef,
            vf_coef: h.vf_coef,
            max_grad_norm: h.max_grad_norm,
            adam_beta1: 0.9,
            adam_beta2: 0.9,
            eta_rule: EtaRule::BufferMean,
            eta_ema_rate: 0.1,
            tw_upper: 100,
            tw_lower: 50,
        }
    }
}

impl MethodConfig {
    pub fn for_method(name: Method) -> Self {
        Self { name, ..Self::default() }
    }

    pub fn shaping(&self) -> ShapingSpec {
        ShapingSpec {
            p: self.lyapunov_p,
            cost_variant: self.cost_variant,
            enabled: self.shaping_enabled.unwrap_or(self.name == Method::Stop),
        }
    }

    pub fn transform(&self) -> TransformKind {
        self.state_transform.unwrap_or(if self.name == Method::Stop {
            TransformKind::SymLoge
        } else {
            TransformKind::Identity
        })
    }

    pub fn hyper(&self) -> PpoHyper {
        PpoHyper {
            clip: self.clip,
            gae_lambda: self.gae_lambda,
            epochs: self.epochs,
            minibatches: self.minibatches,
            vf_coef: self.vf_coef,
            entropy_coef: self.entropy_coef,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shaping().validate()?;
        if self.name.is_learner() {
            self.hyper().validate()?;
            if self.rollout_len == 0 {
                return Err(Error::Config("rollout_len must be positive".into()));
            }
            if self.lr.is_nan() || self.lr <= 0.0 {
                return Err(Error::Config("lr must be positive".into()));
            }
            for b in [self.adam_beta1, self.adam_beta2] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("adam beta {b} outside [0, 1)")));
                }
            }
        }
        if self.name == Method::PpoTw {
            TrainingWheelsState::new(self.tw_upper, self.tw_lower)?;
        }
        Ok(())
    }
}

/// Per-step record of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub trial: usize,
    pub step: u64,
    pub true_cost: f64,
    pub shaped_cost: f64,
    pub action: usize,
    pub destabilizing: u8,
}

/// Everything observed at one interaction step.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    /// 1-based step index.
    pub step: u64,
    pub state: &'a State,
    pub action: usize,
    pub next_state: &'a State,
    pub true_cost: f64,
    pub shaped_cost: f64,
    pub destabilizing: bool,
}

impl StepView<'_> {
    pub fn row(&self, trial: usize) -> MetricsRow {
        MetricsRow {
            trial,
            step: self.step,
            true_cost: self.true_cost,
            shaped_cost: self.shaped_cost,
            action: self.action,
            destabilizing: u8::from(self.destabilizing),
        }
    }
}

/// Diagnostics emitted after each policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateView<'a> {
    pub step: u64,
    pub buffer: &'a RolloutBuffer,
    pub advantages: &'a AdvantageEstimate,
    pub eta: f64,
    pub loss: LossParts,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainSummary {
    pub steps: u64,
    pub updates: usize,
    pub safe_steps: u64,
}

enum Controller {
    Learner(Box<ActorCritic>),
    Wheels(Box<ActorCritic>, TrainingWheelsState),
    MaxWeight,
    Cmu,
    Random,
}

/// Runs one trial and returns its per-step metrics.
pub fn train(env: &EnvConfig, method: &MethodConfig, steps: u64, seed: u64) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(steps as usize);
    train_observed(env, method, steps, seed, |v| rows.push(v.row(0)), |_| {})?;
    Ok(rows)
}

/// Runs one trial, reporting every step to `on_step` and every policy update
/// to `on_update`.
pub fn train_observed<F, G>(
    env_config: &EnvConfig,
    method: &MethodConfig,
    steps: u64,
    seed: u64,
    mut on_step: F,
    mut on_update: G,
) -> Result<TrainSummary>
where
    F: FnMut(&StepView<'_>),
    G: FnMut(&UpdateView<'_>),
{
    method.validate()?;
    let mut env = Env::new(env_config.clone(), seed)?;
    let mut agent_rng = stream_rng(seed, Stream::Agent);
    let mut init_rng = stream_rng(seed, Stream::Init);
    let spec = method.shaping();
    let kind = method.transform();
    let hyper = method.hyper();
    let n_actions = env_config.num_actions();
    let new_agent = |rng: &mut _| {
        ActorCritic::new(
            env_config.obs_dim(),
            n_actions,
            method.lr,
            (method.adam_beta1, method.adam_beta2),
            rng,
        )
        .map(Box::new)
    };
    let mut controller = match method.name {
        Method::Ppo | Method::Stop => Controller::Learner(new_agent(&mut init_rng)?),
        Method::PpoTw => Controller::Wheels(
            new_agent(&mut init_rng)?,
            TrainingWheelsState::new(method.tw_upper, method.tw_lower)?,
        ),
        Method::MaxWeight => Controller::MaxWeight,
        Method::Cmu => Controller::Cmu,
        Method::Random => Controller::Random,
    };

    let mut buffer = RolloutBuffer::new(method.rollout_len);
    let mut est = AvgCostEstimate::default();
    let mut summary = TrainSummary::default();
    let mut obs = transform_state(kind, env.state());

    for step in 1..=steps {
        let state = env.state().clone();
        // (action, behaviour log-prob when the learner acted)
        let (action, learned) = match &mut controller {
            Controller::Learner(agent) => {
                let (a, lp) = agent.act(&obs, &mut agent_rng)?;
                (a, Some(lp))
            }
            Controller::Wheels(agent, tw) => {
                let mut sampled = None;
                let mut failure = None;
                let (a, next_tw) = training_wheels_select(
                    |_| match agent.act(&obs, &mut agent_rng) {
                        Ok((a, lp)) => {
                            sampled = Some(lp);
                            Action(a)
                        }
                        Err(e) => {
                            failure = Some(e);
                            Action(0)
                        }
                    },
                    &state,
                    *tw,
                    env_config,
                );
                if let Some(e) = failure {
                    return Err(e);
                }
                *tw = next_tw;
                if tw.mode == WheelsMode::Safe {
                    summary.safe_steps += 1;
                    buffer.mark_gap();
                }
                (a.0, sampled)
            }
            Controller::MaxWeight => (maxweight_for(env_config, &state).0, None),
            Controller::Cmu => (cmu_for(env_config, &state).0, None),
            Controller::Random => (agent_rng.random_range(0..n_actions), None),
        };

        let (next, cost) = env.step(Action(action))?;
        let shaped = shaped_cost(&state, &next, cost, &spec);
        let next_obs = transform_state(kind, &next);
        let destabilizing = is_destabilizing(&state, Action(action));
        on_step(&StepView {
            step,
            state: &state,
            action,
            next_state: &next,
            true_cost: cost,
            shaped_cost: shaped,
            destabilizing,
        });

        if let (Some(logprob), Controller::Learner(agent) | Controller::Wheels(agent, _)) = (learned, &mut controller) {
            buffer.push(Slot::new(state, obs, action, logprob, shaped, cost, next, next_obs.clone()));
            if buffer.is_full() {
                est = update_eta(&buffer, est, method.eta_rule, method.eta_ema_rate);
                let adv = estimate_advantages(&buffer, &agent.critic, est.eta, hyper.gae_lambda)?;
                let loss = ppo_update(agent, &buffer, &adv, &hyper, &mut agent_rng)?;
                on_update(&UpdateView { step, buffer: &buffer, advantages: &adv, eta: est.eta, loss });
                buffer.clear();
                summary.updates += 1;
            }
        }
        obs = next_obs;
        summary.steps = step;
    }
    Ok(summary)
}
