//! Lyapunov-based cost shaping and state transformations for online
//! average-reward reinforcement learning in queueing networks with unbounded
//! state spaces.
//!
//! The crate bundles the queueing simulators, the shaping and transform
//! machinery, a small from-scratch actor-critic with average-reward PPO,
//! reference schedulers, stability diagnostics, an exact truncated-chain
//! evaluator, and the experiment harness behind the `stop` CLI.

pub mod arppo;
pub mod baselines;
pub mod diagnostics;
pub mod environments;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod policy_net;
pub mod shaping;
pub mod transforms;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from a single trial seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Environment = 0,
    Agent = 1,
    Init = 2,
}

/// Seeded generator for one stream of a trial.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
