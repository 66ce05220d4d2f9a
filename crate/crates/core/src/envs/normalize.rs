//! Online observation and reward normalization.

use serde::{Deserialize, Serialize};

use crate::tensor::Array;

const OBS_EPS: f64 = 1e-8;
const REWARD_STD_FLOOR: f64 = 1e-8;

/// Welford accumulator over a fixed number of features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len(), "feature count");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample variance `m2 / max(count - 1, 1)`.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| (s / d).max(0.0)).collect()
    }

    pub fn variance_of(&self, i: usize) -> f64 {
        let d = (self.count.max(2) - 1) as f64;
        (self.m2[i] / d).max(0.0)
    }
}

/// Per-feature standardization; the statistics absorb each observation
/// before it is normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    stats: RunningStats,
}

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            stats: RunningStats::new(dim),
        }
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    pub fn normalize(&mut self, obs: &Array) -> Array {
        self.stats.update(obs.data());
        self.apply(obs)
    }

    /// Normalize with the current statistics, without updating them.
    pub fn apply(&self, obs: &Array) -> Array {
        let d = (self.stats.count.max(2) - 1) as f64;
        let data = obs
            .data()
            .iter()
            .zip(&self.stats.mean)
            .zip(&self.stats.m2)
            .map(|((&o, &m), &s)| (o - m) / ((s / d).max(0.0) + OBS_EPS).sqrt())
            .collect();
        Array::from_vec(obs.shape(), data).expect("same shape")
    }
}

/// Divides rewards by the running standard deviation of a discounted return
/// trace. Rewards are not centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    gamma: f64,
    trace: f64,
    stats: RunningStats,
}

impl RewardScaler {
    pub fn new(gamma: f64) -> Self {
        assert!((0.0..1.0).contains(&gamma), "gamma must be in [0, 1)");
        Self {
            gamma,
            trace: 0.0,
            stats: RunningStats::new(1),
        }
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    pub fn scale(&mut self, reward: f64, done: bool) -> f64 {
        let keep = if done { 0.0 } else { 1.0 };
        self.trace = self.gamma * self.trace * keep + reward;
        self.stats.update(&[self.trace]);
        reward / self.stats.variance_of(0).sqrt().max(REWARD_STD_FLOOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn first_observation_normalizes_to_zero() {
        let mut n = ObsNormalizer::new(3);
        let out = n.normalize(&Array::vector(vec![1.0, -4.0, 7.5]));
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_stream_stays_zero() {
        let mut n = ObsNormalizer::new(2);
        for _ in 0..100 {
            let out = n.normalize(&Array::vector(vec![3.0, 3.0]));
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gaussian_stream_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dist = Normal::new(3.0, 2.0).unwrap();
        let mut n = ObsNormalizer::new(1);
        let mut outs = Vec::new();
        for _ in 0..10_000 {
            let o = n.normalize(&Array::vector(vec![dist.sample(&mut rng)]));
            outs.push(o.data()[0]);
        }
        let m = outs.iter().sum::<f64>() / outs.len() as f64;
        let v = outs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / outs.len() as f64;
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((v - 1.0).abs() < 0.1, "var {v}");
    }

    #[test]
    fn zero_rewards_stay_zero() {
        let mut s = RewardScaler::new(0.99);
        for i in 0..100 {
            assert_eq!(s.scale(0.0, i % 7 == 0), 0.0);
        }
    }

    #[test]
    fn constant_reward_without_discount_is_finite() {
        let mut s = RewardScaler::new(0.0);
        for _ in 0..100 {
            assert!(s.scale(1.0, false).is_finite());
        }
    }

    #[test]
    fn gaussian_rewards_scaled_to_unit_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = Normal::new(0.0, 25.0).unwrap();
        let mut s = RewardScaler::new(0.99);
        let mut outs = Vec::new();
        for t in 0..10_000 {
            outs.push(s.scale(dist.sample(&mut rng), t % 500 == 499));
        }
        let tail = &outs[5_000..];
        let m = tail.iter().sum::<f64>() / tail.len() as f64;
        let std = (tail.iter().map(|x| (x - m).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
        assert!(std > 0.05 && std < 5.0, "std {std}");
    }

    proptest! {
        #[test]
        fn welford_matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let mut s = RunningStats::new(1);
            for &x in &xs {
                s.update(&[x]);
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let m2: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
            let var = m2 / (n - 1.0).max(1.0);
            prop_assert!((s.mean()[0] - mean).abs() <= 1e-8 * (1.0 + mean.abs()));
            prop_assert!((s.variance()[0] - var).abs() <= 1e-8 * (1.0 + var));
        }
    }
}
