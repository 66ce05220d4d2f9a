//! Breakout on a 10x10 grid with MinAtar's channel layout.
//!
//! Channels: 0 paddle, 1 ball, 2 trail (ball position one step ago),
//! 3 bricks. Actions: 0 no-op, 1 left, 2 right. The ball moves diagonally one
//! cell per step; breaking a brick gives `+1` and reflects the ball
//! vertically. Missing the ball with the paddle ends the episode. When the
//! last brick is cleared and the ball reaches the bottom row, the three brick
//! rows are refilled.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Array;

use super::Step;

pub const SIZE: usize = 10;
pub const CHANNELS: usize = 4;
pub const N_ACTIONS: usize = 3;

pub const PADDLE: usize = 0;
pub const BALL: usize = 1;
pub const TRAIL: usize = 2;
pub const BRICK: usize = 3;

pub const NOOP: usize = 0;
pub const MOVE_LEFT: usize = 1;
pub const MOVE_RIGHT: usize = 2;

const BRICK_ROWS: std::ops::Range<usize> = 1..4;

/// Ball heading: 0 up-left, 1 up-right, 2 down-right, 3 down-left.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreakoutState {
    pub ball_x: i32,
    pub ball_y: i32,
    pub ball_dir: usize,
    pub last_x: i32,
    pub last_y: i32,
    pub paddle: i32,
    pub bricks: [[bool; SIZE]; SIZE],
    pub strike: bool,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct BreakoutMini {
    s: BreakoutState,
}

impl Default for BreakoutMini {
    fn default() -> Self {
        Self::new()
    }
}

impl BreakoutMini {
    pub fn new() -> Self {
        let mut env = Self {
            s: Self::initial_state(false),
        };
        env.s.terminal = true;
        env
    }

    /// Start state; `from_right` chooses the ball's starting corner.
    pub fn initial_state(from_right: bool) -> BreakoutState {
        let (ball_x, ball_dir) = if from_right { (9, 3) } else { (0, 2) };
        let mut bricks = [[false; SIZE]; SIZE];
        for row in &mut bricks[BRICK_ROWS] {
            row.fill(true);
        }
        BreakoutState {
            ball_x,
            ball_y: 3,
            ball_dir,
            last_x: ball_x,
            last_y: 3,
            paddle: 4,
            bricks,
            strike: false,
            terminal: false,
        }
    }

    pub fn state(&self) -> &BreakoutState {
        &self.s
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Array {
        self.s = Self::initial_state(rng.random_bool(0.5));
        self.observe()
    }

    pub fn reset_to(&mut self, state: BreakoutState) -> Array {
        self.s = state;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        if self.s.terminal {
            return Err(Error::Env("step called on a finished episode; reset first".into()));
        }
        if action >= N_ACTIONS {
            return Err(Error::Env(format!("invalid breakout action {action}")));
        }
        let s = &mut self.s;
        let mut reward = 0.0;
        match action {
            MOVE_LEFT => s.paddle = (s.paddle - 1).max(0),
            MOVE_RIGHT => s.paddle = (s.paddle + 1).min(SIZE as i32 - 1),
            _ => {}
        }

        s.last_x = s.ball_x;
        s.last_y = s.ball_y;
        let (dx, dy) = [(-1, -1), (1, -1), (1, 1), (-1, 1)][s.ball_dir];
        let mut new_x = s.ball_x + dx;
        let mut new_y = s.ball_y + dy;

        let mut strike_toggle = false;
        if !(0..SIZE as i32).contains(&new_x) {
            new_x = new_x.clamp(0, SIZE as i32 - 1);
            s.ball_dir = [1, 0, 3, 2][s.ball_dir];
        }
        if new_y < 0 {
            new_y = 0;
            s.ball_dir = [3, 2, 1, 0][s.ball_dir];
        } else if s.bricks[new_y as usize][new_x as usize] {
            strike_toggle = true;
            if !s.strike {
                reward += 1.0;
                s.strike = true;
                s.bricks[new_y as usize][new_x as usize] = false;
                new_y = s.last_y;
                s.ball_dir = [3, 2, 1, 0][s.ball_dir];
            }
        } else if new_y == SIZE as i32 - 1 {
            if s.bricks.iter().all(|row| row.iter().all(|&b| !b)) {
                for row in &mut s.bricks[BRICK_ROWS] {
                    row.fill(true);
                }
            }
            if s.ball_x == s.paddle {
                s.ball_dir = [3, 2, 1, 0][s.ball_dir];
                new_y = s.last_y;
            } else if new_x == s.paddle {
                s.ball_dir = [2, 3, 0, 1][s.ball_dir];
                new_y = s.last_y;
            } else {
                s.terminal = true;
            }
        }
        if !strike_toggle {
            s.strike = false;
        }
        s.ball_x = new_x;
        s.ball_y = new_y;

        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.s.terminal,
            truncated: false,
        })
    }

    pub fn observe(&self) -> Array {
        let s = &self.s;
        let mut v = vec![0.0; CHANNELS * SIZE * SIZE];
        let idx = |c: usize, y: i32, x: i32| (c * SIZE + y as usize) * SIZE + x as usize;
        v[idx(BALL, s.ball_y, s.ball_x)] = 1.0;
        v[idx(PADDLE, SIZE as i32 - 1, s.paddle)] = 1.0;
        v[idx(TRAIL, s.last_y, s.last_x)] = 1.0;
        for (y, row) in s.bricks.iter().enumerate() {
            for (x, &b) in row.iter().enumerate() {
                if b {
                    v[idx(BRICK, y as i32, x as i32)] = 1.0;
                }
            }
        }
        Array::from_vec(&[CHANNELS, SIZE, SIZE], v).expect("fixed shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(obs: &Array, c: usize, y: usize, x: usize) -> f64 {
        obs.data()[(c * SIZE + y) * SIZE + x]
    }

    #[test]
    fn initial_layout() {
        let mut env = BreakoutMini::new();
        let obs = env.reset_to(BreakoutMini::initial_state(false));
        assert_eq!(cell(&obs, BALL, 3, 0), 1.0);
        assert_eq!(cell(&obs, PADDLE, 9, 4), 1.0);
        let bricks: f64 = obs.data()[BRICK * 100..].iter().sum();
        assert_eq!(bricks, 30.0);
        assert!(obs.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn step_after_terminal_errors() {
        let mut env = BreakoutMini::new();
        assert!(env.step(NOOP).is_err());
    }

    #[test]
    fn ball_moves_diagonally_down_right() {
        let mut env = BreakoutMini::new();
        env.reset_to(BreakoutMini::initial_state(false));
        let s = env.step(NOOP).unwrap();
        assert_eq!((env.state().ball_x, env.state().ball_y), (1, 4));
        assert_eq!(cell(&s.obs, TRAIL, 3, 0), 1.0);
        assert_eq!(s.reward, 0.0);
    }
}
