//! Built-in environments and the transition type they produce.

pub mod breakout;
pub mod chain;
mod normalize;

pub use breakout::BreakoutMini;
pub use chain::ChainEnv;
pub use normalize::{ObsNormalizer, RewardScaler, RunningStats};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ArchDims, EnvFamily};
use crate::tensor::Array;

pub const CHAIN_STATES: usize = 10;
pub const CHAIN_MAX_STEPS: usize = 100;

/// Result of one environment step. `done` marks a true terminal state (no
/// bootstrapping); `truncated` marks a time-limit cut.
#[derive(Clone, Debug)]
pub struct Step {
    pub obs: Array,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

impl Step {
    pub fn episode_over(&self) -> bool {
        self.done || self.truncated
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Array,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Array,
    pub done: bool,
    pub truncated: bool,
    /// Whether `action` was the greedy choice.
    pub greedy: bool,
}

impl Transition {
    pub fn episode_over(&self) -> bool {
        self.done || self.truncated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Chain10,
    BreakoutMini,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Chain10 => "chain10",
            EnvKind::BreakoutMini => "breakout_mini",
        }
    }

    pub fn family(self) -> EnvFamily {
        match self {
            EnvKind::Chain10 => EnvFamily::Chain,
            EnvKind::BreakoutMini => EnvFamily::MinAtar,
        }
    }

    pub fn n_actions(self) -> usize {
        match self {
            EnvKind::Chain10 => 2,
            EnvKind::BreakoutMini => breakout::N_ACTIONS,
        }
    }

    pub fn arch_dims(self) -> ArchDims {
        match self {
            EnvKind::Chain10 => ArchDims::chain(CHAIN_STATES, 2),
            EnvKind::BreakoutMini => ArchDims::minatar(breakout::CHANNELS, breakout::N_ACTIONS),
        }
    }

    pub fn make(self) -> Env {
        match self {
            EnvKind::Chain10 => Env::Chain(ChainEnv::new(CHAIN_STATES, CHAIN_MAX_STEPS)),
            EnvKind::BreakoutMini => Env::Breakout(BreakoutMini::new()),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain10" => Ok(EnvKind::Chain10),
            "breakout_mini" => Ok(EnvKind::BreakoutMini),
            other => Err(Error::config("env", format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Env {
    Chain(ChainEnv),
    Breakout(BreakoutMini),
}

impl Env {
    pub fn n_actions(&self) -> usize {
        match self {
            Env::Chain(_) => 2,
            Env::Breakout(_) => breakout::N_ACTIONS,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Array {
        match self {
            Env::Chain(e) => e.reset(),
            Env::Breakout(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        match self {
            Env::Chain(e) => e.step(action),
            Env::Breakout(e) => e.step(action),
        }
    }
}
