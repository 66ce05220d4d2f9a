use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Sparse LeCun initialization of a `[fan_out, fan_in]` weight block.
///
/// Every output unit gets exactly `round(sparsity * fan_in)` zero weights at
/// positions drawn uniformly without replacement; the rest are normal with
/// standard deviation `1/sqrt(fan_in)`.
pub fn sparse_init<R: Rng + ?Sized>(
    weights: &mut [f64],
    fan_out: usize,
    fan_in: usize,
    sparsity: f64,
    rng: &mut R,
) {
    assert_eq!(weights.len(), fan_out * fan_in);
    assert!((0.0..1.0).contains(&sparsity), "sparsity must be in [0, 1)");
    let n_zero = (sparsity * fan_in as f64).round() as usize;
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let mut keep = vec![true; fan_in];
    for row in weights.chunks_exact_mut(fan_in) {
        keep.fill(true);
        for i in index::sample(rng, fan_in, n_zero) {
            keep[i] = false;
        }
        for (w, &k) in row.iter_mut().zip(&keep) {
            *w = if k { normal.sample(rng) } else { 0.0 };
        }
    }
}

/// Dense LeCun normal initialization.
pub fn lecun_init<R: Rng + ?Sized>(weights: &mut [f64], fan_out: usize, fan_in: usize, rng: &mut R) {
    sparse_init(weights, fan_out, fan_in, 0.0, rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_zero_count_per_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = vec![0.0; 7 * 10];
        sparse_init(&mut w, 7, 10, 0.9, &mut rng);
        for row in w.chunks_exact(10) {
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 9);
        }
    }

    #[test]
    fn zero_sparsity_is_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = vec![0.0; 4 * 25];
        lecun_init(&mut w, 4, 25, &mut rng);
        assert!(w.iter().all(|&x| x != 0.0));
    }

    #[test]
    fn nonzero_std_matches_lecun() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fan_in = 50;
        let mut vals = Vec::new();
        while vals.len() < 10_000 {
            let mut w = vec![0.0; 10 * fan_in];
            sparse_init(&mut w, 10, fan_in, 0.9, &mut rng);
            vals.extend(w.into_iter().filter(|&x| x != 0.0));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / (fan_in as f64).sqrt();
        assert!((std - target).abs() / target < 0.1, "std {std} vs {target}");
    }
}
