use crate::error::{Error, Result};
use crate::tensor::Array;

use super::Step;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Deterministic chain: start at the left end, `+1` and termination on
/// reaching the right end, truncation after `max_steps` steps.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    n: usize,
    max_steps: usize,
    pos: usize,
    t: usize,
    done: bool,
}

impl ChainEnv {
    pub fn new(n: usize, max_steps: usize) -> Self {
        assert!(n >= 2, "chain needs at least two states");
        Self {
            n,
            max_steps,
            pos: 0,
            t: 0,
            done: true,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn reset(&mut self) -> Array {
        self.pos = 0;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Env("step called on a finished episode; reset first".into()));
        }
        if action > RIGHT {
            return Err(Error::Env(format!("invalid chain action {action}")));
        }
        self.pos = self.next_state(self.pos, action);
        self.t += 1;
        let terminal = self.pos == self.n - 1;
        let truncated = !terminal && self.t >= self.max_steps;
        self.done = terminal || truncated;
        Ok(Step {
            obs: self.observe(),
            reward: if terminal { 1.0 } else { 0.0 },
            done: terminal,
            truncated,
        })
    }

    pub fn next_state(&self, s: usize, action: usize) -> usize {
        match action {
            LEFT => s.saturating_sub(1),
            _ => (s + 1).min(self.n - 1),
        }
    }

    /// `P[s][s']` under `action`; the terminal state is absorbing.
    pub fn transition_matrix(&self, action: usize) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|s| {
                let mut row = vec![0.0; self.n];
                let next = if s == self.n - 1 { s } else { self.next_state(s, action) };
                row[next] = 1.0;
                row
            })
            .collect()
    }

    fn observe(&self) -> Array {
        let mut v = vec![0.0; self.n];
        v[self.pos] = 1.0;
        Array::vector(v)
    }
}
