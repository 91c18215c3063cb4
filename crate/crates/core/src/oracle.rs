//! Exact average-cost evaluation of fixed policies on truncated chains.
//!
//! Queues are capped at `K` (arrivals beyond the cap are dropped, so the
//! queue stays at `K`), which turns the network into a finite Markov chain
//! under any stationary policy. Its stationary distribution gives the exact
//! long-run average of both the true and the shaped cost. On a finite chain
//! the Lyapunov drift has zero stationary mean, so the two must agree.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::baselines::{cmu_for, maxweight_for};
use crate::environments::{
    apply_nmodel, apply_server_alloc, sample_nmodel_event, sample_server_alloc_outcome, Action, EnvConfig,
    NModelEvent, ServerAllocConfig, ServerAllocOutcome, State,
};
use crate::shaping::{shaped_cost, ShapingSpec};
use crate::{stream_rng, Error, Result, Stream};

pub const DEFAULT_STATE_LIMIT: usize = 1_000_000;
const DENSE_LIMIT: usize = 5_000;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 1_000_000;

/// Fixed policies evaluated by the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidatePolicy {
    MaxWeight,
    Cmu,
    ServeLongest,
    ServeShortest,
    UniformRandom,
}

impl CandidatePolicy {
    pub const ALL: [CandidatePolicy; 5] = [
        CandidatePolicy::MaxWeight,
        CandidatePolicy::Cmu,
        CandidatePolicy::ServeLongest,
        CandidatePolicy::ServeShortest,
        CandidatePolicy::UniformRandom,
    ];

    /// Action distribution in `state`.
    pub fn distribution(self, env: &EnvConfig, state: &State) -> Vec<f64> {
        let n = env.num_actions();
        let one_hot = |a: usize| {
            let mut d = vec![0.0; n];
            d[a] = 1.0;
            d
        };
        match self {
            CandidatePolicy::MaxWeight => one_hot(maxweight_for(env, state).0),
            CandidatePolicy::Cmu => one_hot(cmu_for(env, state).0),
            CandidatePolicy::ServeLongest => {
                let max = state.max_queue();
                one_hot(state.queues.iter().position(|&q| q == max).unwrap_or(0))
            }
            CandidatePolicy::ServeShortest => {
                let min = state.queues.iter().copied().min().unwrap_or(0);
                one_hot(state.queues.iter().position(|&q| q == min).unwrap_or(0))
            }
            CandidatePolicy::UniformRandom => vec![1.0 / n as f64; n],
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, env: &EnvConfig, state: &State, rng: &mut R) -> Action {
        let dist = self.distribution(env, state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return Action(a);
            }
        }
        Action(dist.len() - 1)
    }
}

impl fmt::Display for CandidatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidatePolicy::MaxWeight => "maxweight",
            CandidatePolicy::Cmu => "cmu",
            CandidatePolicy::ServeLongest => "serve-longest",
            CandidatePolicy::ServeShortest => "serve-shortest",
            CandidatePolicy::UniformRandom => "uniform-random",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedChain {
    pub env: EnvConfig,
    pub cap: u32,
    pub states: Vec<State>,
    index: HashMap<State, usize>,
    /// Sparse transition rows `(next index, probability)`, sorted by index.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Expected one-step true cost from each state.
    pub expected_true_cost: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostKind {
    True,
    Shaped(ShapingSpec),
}

impl TruncatedChain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, state: &State) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from]
            .binary_search_by_key(&to, |&(j, _)| j)
            .map(|k| self.rows[from][k].1)
            .unwrap_or(0.0)
    }

    /// Expected one-step cost of each state under `kind`.
    pub fn expected_costs(&self, kind: CostKind) -> Vec<f64> {
        match kind {
            CostKind::True => self.expected_true_cost.clone(),
            CostKind::Shaped(spec) => self
                .rows
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let s = &self.states[i];
                    row.iter()
                        .map(|&(j, p)| {
                            let next = &self.states[j];
                            p * shaped_cost(s, next, self.env.cost(next), &spec)
                        })
                        .sum()
                })
                .collect(),
        }
    }
}

/// Queues whose connectivity is random (0 < c < 1) contribute a flag bit to
/// the enumerated state; others have a constant flag.
fn random_flag_queues(cfg: &ServerAllocConfig) -> Vec<usize> {
    cfg.connect_probs
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0 && c < 1.0)
        .map(|(i, _)| i)
        .collect()
}

/// Every flag vector with its probability.
fn flag_outcomes(cfg: &ServerAllocConfig) -> Vec<(Vec<u8>, f64)> {
    let base: Vec<u8> = cfg.connect_probs.iter().map(|&c| u8::from(c >= 1.0)).collect();
    let random = random_flag_queues(cfg);
    (0..1usize << random.len())
        .map(|mask| {
            let mut flags = base.clone();
            let mut prob = 1.0;
            for (bit, &i) in random.iter().enumerate() {
                let on = mask >> bit & 1 == 1;
                flags[i] = u8::from(on);
                prob *= if on { cfg.connect_probs[i] } else { 1.0 - cfg.connect_probs[i] };
            }
            (flags, prob)
        })
        .collect()
}

fn enumerate_states(env: &EnvConfig, cap: u32) -> Vec<State> {
    let n = env.num_queues();
    let flag_sets: Vec<Vec<u8>> = match env {
        EnvConfig::ServerAlloc(c) => flag_outcomes(c).into_iter().map(|(f, _)| f).collect(),
        EnvConfig::NModel(_) => vec![Vec::new()],
    };
    let side = cap as usize + 1;
    let total = side.pow(n as u32);
    let mut states = Vec::with_capacity(total * flag_sets.len());
    for code in 0..total {
        let mut rest = code;
        let queues: Vec<u32> = (0..n)
            .map(|_| {
                let q = (rest % side) as u32;
                rest /= side;
                q
            })
            .collect();
        for flags in &flag_sets {
            states.push(State::new(queues.clone(), flags.clone()));
        }
    }
    states
}

fn cap_state(mut s: State, cap: u32) -> State {
    s.queues.iter_mut().for_each(|q| *q = (*q).min(cap));
    s
}

/// Successor distribution of `(state, action)` on the capped chain.
fn successors(env: &EnvConfig, state: &State, action: Action, cap: u32) -> Vec<(State, f64)> {
    let mut out = Vec::new();
    match env {
        EnvConfig::ServerAlloc(cfg) => {
            let a = action.0;
            let p_serve = cfg.service_probs[a];
            let service: Vec<(bool, f64)> = [(true, p_serve), (false, 1.0 - p_serve)]
                .into_iter()
                .filter(|&(_, p)| p > 0.0)
                .collect();
            let flags = flag_outcomes(cfg);
            let n = cfg.num_queues();
            for mask in 0..1usize << n {
                let mut p_arr = 1.0;
                let arrivals: Vec<bool> = (0..n)
                    .map(|i| {
                        let on = mask >> i & 1 == 1;
                        p_arr *= if on { cfg.arrival_rates[i] } else { 1.0 - cfg.arrival_rates[i] };
                        on
                    })
                    .collect();
                if p_arr == 0.0 {
                    continue;
                }
                for &(success, p_s) in &service {
                    for (next_flags, p_f) in &flags {
                        let outcome = ServerAllocOutcome {
                            service_success: success,
                            arrivals: arrivals.clone(),
                            next_flags: next_flags.clone(),
                        };
                        let next = cap_state(apply_server_alloc(state, action, &outcome), cap);
                        out.push((next, p_arr * p_s * p_f));
                    }
                }
            }
        }
        EnvConfig::NModel(cfg) => {
            for (event, p) in NModelEvent::ALL.into_iter().zip(cfg.event_probs()) {
                out.push((cap_state(apply_nmodel(state, action, event), cap), p));
            }
        }
    }
    out
}

/// Enumerates the capped chain under `policy` (an action distribution per state).
pub fn build_truncated_chain<P>(env: &EnvConfig, policy: P, cap: u32, state_limit: usize) -> Result<TruncatedChain>
where
    P: Fn(&State) -> Vec<f64>,
{
    env.validate()?;
    if cap < 1 {
        return Err(Error::Config("truncation cap must be at least 1".into()));
    }
    let flag_bits = match env {
        EnvConfig::ServerAlloc(c) => random_flag_queues(c).len() as u32,
        EnvConfig::NModel(_) => 0,
    };
    let count = (cap as u128 + 1)
        .checked_pow(env.num_queues() as u32)
        .and_then(|c| c.checked_mul(1u128 << flag_bits.min(100)))
        .unwrap_or(u128::MAX);
    if count > state_limit as u128 {
        return Err(Error::ChainTooLarge { states: count, limit: state_limit });
    }

    let states = enumerate_states(env, cap);
    let index: HashMap<State, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let mut rows = Vec::with_capacity(states.len());
    let mut expected_true_cost = Vec::with_capacity(states.len());
    for state in &states {
        let dist = policy(state);
        if dist.len() != env.num_actions() || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("policy returned an invalid distribution {dist:?}")));
        }
        let mut row: HashMap<usize, f64> = HashMap::new();
        let mut cost = 0.0;
        for (a, &pa) in dist.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (next, p) in successors(env, state, Action(a), cap) {
                cost += pa * p * env.cost(&next);
                *row.entry(index[&next]).or_insert(0.0) += pa * p;
            }
        }
        let mut row: Vec<(usize, f64)> = row.into_iter().collect();
        row.sort_by_key(|&(j, _)| j);
        rows.push(row);
        expected_true_cost.push(cost);
    }
    Ok(TruncatedChain { env: env.clone(), cap, states, index, rows, expected_true_cost })
}

/// Convenience wrapper for the built-in candidate policies.
pub fn build_for_policy(env: &EnvConfig, policy: CandidatePolicy, cap: u32) -> Result<TruncatedChain> {
    build_truncated_chain(env, |s| policy.distribution(env, s), cap, DEFAULT_STATE_LIMIT)
}

/// Strongly connected components (iterative Kosaraju); returns a component id
/// per state.
fn components(rows: &[Vec<(usize, f64)>]) -> (Vec<usize>, usize) {
    let n = rows.len();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut stack = vec![(root, 0usize)];
        while let Some((v, k)) = stack.last_mut() {
            if let Some(&(w, _)) = rows[*v].get(*k) {
                *k += 1;
                if !seen[w] {
                    seen[w] = true;
                    stack.push((w, 0));
                }
            } else {
                order.push(*v);
                stack.pop();
            }
        }
    }
    let mut reverse = vec![Vec::new(); n];
    for (v, row) in rows.iter().enumerate() {
        for &(w, _) in row {
            reverse[w].push(v);
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for &root in order.iter().rev() {
        if comp[root] != usize::MAX {
            continue;
        }
        comp[root] = count;
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            for &w in &reverse[v] {
                if comp[w] == usize::MAX {
                    comp[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    (comp, count)
}

/// Sizes of the closed communicating classes.
pub fn closed_classes(chain: &TruncatedChain) -> Vec<usize> {
    let (comp, count) = components(&chain.rows);
    let mut closed = vec![true; count];
    let mut sizes = vec![0usize; count];
    for (v, row) in chain.rows.iter().enumerate() {
        sizes[comp[v]] += 1;
        if row.iter().any(|&(w, p)| p > 0.0 && comp[w] != comp[v]) {
            closed[comp[v]] = false;
        }
    }
    (0..count).filter(|&c| closed[c]).map(|c| sizes[c]).collect()
}

/// Unique stationary distribution; the chain must have exactly one closed
/// class (transient states are allowed and get zero mass).
pub fn stationary_distribution(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let closed = closed_classes(chain);
    if closed.len() != 1 {
        return Err(Error::MultiClass { sizes: closed });
    }
    let n = chain.len();
    let pi = if n <= DENSE_LIMIT { dense_solve(chain)? } else { power_iteration(chain)? };
    Ok(pi)
}

fn dense_solve(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let n = chain.len();
    // (Pᵀ − I) π = 0 with the last equation replaced by Σπ = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, row) in chain.rows.iter().enumerate() {
        for &(j, p) in row {
            a[(j, i)] += p;
        }
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Contract("stationary system is singular".into()))?;
    Ok(pi.iter().map(|&x| if x.abs() < 1e-15 { 0.0 } else { x }).collect())
}

fn power_iteration(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let n = chain.len();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITERS {
        // lazy chain (P + I)/2 shares π and is aperiodic
        next.iter_mut().zip(&pi).for_each(|(x, p)| *x = 0.5 * p);
        for (i, row) in chain.rows.iter().enumerate() {
            let mass = 0.5 * pi[i];
            for &(j, p) in row {
                next[j] += mass * p;
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if diff < POWER_TOL {
            return Ok(pi);
        }
    }
    Err(Error::Contract("power iteration did not converge".into()))
}

/// Σₛ π(s)·E[one-step cost | s].
pub fn stationary_average_cost(chain: &TruncatedChain, kind: CostKind) -> Result<f64> {
    let pi = stationary_distribution(chain)?;
    Ok(pi.iter().zip(chain.expected_costs(kind)).map(|(p, c)| p * c).sum())
}

/// Monte-Carlo estimate of the truncated chain's average true cost: returns
/// `(mean, standard error)` from `batches` batch means.
pub fn simulate_truncated(
    env: &EnvConfig,
    policy: CandidatePolicy,
    cap: u32,
    steps: u64,
    batches: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut env_rng = stream_rng(seed, Stream::Environment);
    let mut pol_rng = stream_rng(seed, Stream::Agent);
    let mut state = cap_state(env.initial_state(&mut env_rng), cap);
    let per_batch = (steps / batches).max(1);
    let mut means = Vec::with_capacity(batches as usize);
    for _ in 0..batches {
        let mut acc = 0.0;
        for _ in 0..per_batch {
            let action = policy.sample(env, &state, &mut pol_rng);
            let next = match env {
                EnvConfig::ServerAlloc(cfg) => {
                    let outcome = sample_server_alloc_outcome(cfg, action, &mut env_rng);
                    apply_server_alloc(&state, action, &outcome)
                }
                EnvConfig::NModel(cfg) => apply_nmodel(&state, action, sample_nmodel_event(cfg, &mut env_rng)),
            };
            state = cap_state(next, cap);
            acc += env.cost(&state);
        }
        means.push(acc / per_batch as f64);
    }
    let k = means.len() as f64;
    let mean = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (k - 1.0);
    Ok((mean, (var / k).sqrt()))
}

/// One line of the oracle consistency table.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub env: String,
    pub policy: CandidatePolicy,
    pub j_true: f64,
    pub j_shaped: f64,
    pub pass: bool,
}

/// Evaluates every candidate policy under both objectives; also reports
/// whether the two objectives rank the policies identically.
pub fn consistency_table(name: &str, env: &EnvConfig, cap: u32, spec: ShapingSpec, tol: f64) -> Result<(Vec<OracleRow>, bool)> {
    let mut rows = Vec::new();
    for policy in CandidatePolicy::ALL {
        let chain = build_for_policy(env, policy, cap)?;
        let j_true = stationary_average_cost(&chain, CostKind::True)?;
        let j_shaped = stationary_average_cost(&chain, CostKind::Shaped(spec))?;
        let pass = (j_true - j_shaped).abs() <= tol * j_true.abs().max(1.0);
        rows.push(OracleRow { env: name.to_string(), policy, j_true, j_shaped, pass });
    }
    let same_order = same_ranking(
        &rows.iter().map(|r| r.j_true).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.j_shaped).collect::<Vec<_>>(),
        tol,
    );
    Ok((rows, same_order))
}

/// Pairwise comparison of two score vectors, treating differences within
/// `tol` (relative) as ties in both.
pub fn same_ranking(a: &[f64], b: &[f64], tol: f64) -> bool {
    let cmp = |x: f64, y: f64| {
        let scale = x.abs().max(y.abs()).max(1.0);
        if (x - y).abs() <= tol * scale {
            0
        } else if x < y {
            -1
        } else {
            1
        }
    };
    (0..a.len()).all(|i| (0..a.len()).all(|j| cmp(a[i], a[j]) == cmp(b[i], b[j])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::load_preset;
    use crate::shaping::CostVariant;

    fn single_queue(lambda: f64) -> EnvConfig {
        EnvConfig::ServerAlloc(ServerAllocConfig::new(vec![lambda], vec![1.0], vec![1.0]))
    }

    #[test]
    fn one_queue_cap_one() {
        let env = single_queue(0.5);
        let chain = build_truncated_chain(&env, |_| vec![1.0], 1, 100).unwrap();
        assert_eq!(chain.len(), 2);
        let s0 = chain.index_of(&State::new(vec![0], vec![1])).unwrap();
        let s1 = chain.index_of(&State::new(vec![1], vec![1])).unwrap();
        assert_eq!(chain.transition_prob(s0, s1), 0.5);
        assert_eq!(chain.transition_prob(s0, s0), 0.5);
        assert_eq!(chain.transition_prob(s1, s0), 0.5);
        assert_eq!(chain.transition_prob(s1, s1), 0.5);

        let pi = stationary_distribution(&chain).unwrap();
        assert!((pi[s0] - 0.5).abs() < 1e-12 && (pi[s1] - 0.5).abs() < 1e-12);
        let j = stationary_average_cost(&chain, CostKind::True).unwrap();
        assert!((j - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_arrivals_absorb_at_zero() {
        let env = EnvConfig::ServerAlloc(ServerAllocConfig::new(vec![0.0, 0.0], vec![0.5, 0.7], vec![1.0, 1.0]));
        let chain = build_for_policy(&env, CandidatePolicy::MaxWeight, 3).unwrap();
        let zero = chain.index_of(&State::new(vec![0, 0], vec![1, 1])).unwrap();
        assert_eq!(chain.transition_prob(zero, zero), 1.0);
        assert_eq!(closed_classes(&chain), vec![1]);
        assert_eq!(stationary_average_cost(&chain, CostKind::True).unwrap(), 0.0);
    }

    #[test]
    fn rows_are_stochastic() {
        for name in ["sa-medium", "sa-high-faulty", "nmodel-veryhigh-2"] {
            let env = load_preset(name).unwrap();
            let chain = build_for_policy(&env, CandidatePolicy::MaxWeight, 10).unwrap();
            for row in &chain.rows {
                let total: f64 = row.iter().map(|&(_, p)| p).sum();
                assert!((total - 1.0).abs() <= 1e-12, "{name}: row sum {total}");
            }
        }
    }

    #[test]
    fn state_count_and_limit() {
        let env = load_preset("sa-high-faulty").unwrap();
        let chain = build_for_policy(&env, CandidatePolicy::UniformRandom, 4).unwrap();
        assert_eq!(chain.len(), 25 * 4);
        let big = load_preset("sa-10queue").unwrap();
        assert!(matches!(build_for_policy(&big, CandidatePolicy::MaxWeight, 10), Err(Error::ChainTooLarge { .. })));
    }

    #[test]
    fn two_closed_classes_are_reported() {
        // no arrivals and a policy that never serves queue 1: every q1 level is its own class
        let env = EnvConfig::ServerAlloc(ServerAllocConfig::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]));
        let chain = build_truncated_chain(&env, |_| vec![0.0, 1.0], 1, 100).unwrap();
        match stationary_distribution(&chain) {
            Err(Error::MultiClass { sizes }) => assert_eq!(sizes, vec![1, 1]),
            other => panic!("expected a multi-class error, got {other:?}"),
        }
    }

    #[test]
    fn power_iteration_agrees_with_dense_solve() {
        let env = load_preset("sa-high-faulty").unwrap();
        let chain = build_for_policy(&env, CandidatePolicy::MaxWeight, 6).unwrap();
        let dense = dense_solve(&chain).unwrap();
        let power = power_iteration(&chain).unwrap();
        let diff: f64 = dense.iter().zip(&power).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 1e-9, "L1 difference {diff}");
    }

    #[test]
    fn shaped_equals_true_on_finite_chains() {
        let env = load_preset("nmodel-veryhigh-2").unwrap();
        for p in [1.0, 2.0, 3.0] {
            let spec = ShapingSpec::new(p, CostVariant::Identity, true);
            let (rows, same) = consistency_table("nmodel", &env, 8, spec, 1e-8).unwrap();
            assert!(rows.iter().all(|r| r.pass), "{rows:?}");
            assert!(same);
        }
    }

    #[test]
    fn ranking_comparison() {
        assert!(same_ranking(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0 + 1e-12], 1e-8));
        assert!(!same_ranking(&[1.0, 2.0], &[2.0, 1.0], 1e-8));
    }
}
