//! Replay-free streaming deep reinforcement learning.
//!
//! Three streaming agents (streaming DQN, Stream Q(λ), QRC(λ)) share a small
//! hand-differentiated network engine and can be augmented with a
//! self-predictive representation (SPR) objective whose gradients are
//! optionally decorrelated by orthogonal projection.

pub mod agents;
pub mod analysis;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rngs;
pub mod run;
pub mod spr;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Array, Component, ParamTree};
