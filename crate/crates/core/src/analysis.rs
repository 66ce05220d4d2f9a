//! Representation diagnostics and score aggregation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::agents::{select_action, QNetwork};
use crate::envs::{EnvKind, ObsNormalizer};
use crate::error::{Error, Result};
use crate::nn::kernels::{gemm, MatRef};
use crate::tensor::{Array, ParamTree};

/// `<u, v> / (|u| |v| + 1e-12)` over the flattened trees.
pub fn grad_cosine(u: &ParamTree, v: &ParamTree) -> Result<f64> {
    let d = u.dot(v)?;
    Ok(d / (u.norm() * v.norm() + 1e-12))
}

/// Row-per-observation matrix of encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    cols: usize,
    steps: Vec<u64>,
    data: Vec<f64>,
}

impl LatentMatrix {
    pub fn new(cols: usize) -> Self {
        Self {
            cols,
            steps: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_rows(cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || !data.len().is_multiple_of(cols) {
            return Err(Error::LengthMismatch {
                expected: cols,
                got: data.len(),
            });
        }
        Ok(Self {
            cols,
            steps: (0..(data.len() / cols) as u64).collect(),
            data,
        })
    }

    pub fn push(&mut self, step: u64, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::LengthMismatch {
                expected: self.cols,
                got: row.len(),
            });
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!("latent row at step {step}")));
        }
        self.steps.push(step);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["t".to_string()];
        header.extend((0..self.cols).map(|i| format!("dim{i}")));
        w.write_record(&header)?;
        for (i, t) in self.steps.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.data[i * self.cols..(i + 1) * self.cols].iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Format {
                what: "latent csv",
                msg: "first column must be `t`".into(),
            });
        }
        let mut m = Self::new(header.len() - 1);
        let bad = |msg: String| Error::Format {
            what: "latent csv",
            msg,
        };
        for rec in r.records() {
            let rec = rec?;
            let t: u64 = rec
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|e| bad(format!("step: {e}")))?;
            let row: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value `{v}`: {e}"))))
                .collect::<Result<_>>()?;
            m.push(t, &row)?;
        }
        Ok(m)
    }
}

/// Singular values of a row-major `rows x cols` matrix, via the eigenvalues
/// of the smaller Gram matrix.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let x = MatRef::new(data, rows, cols);
    let n = rows.min(cols);
    let mut g = vec![0.0; n * n];
    if cols <= rows {
        gemm(x.t(), x, 0.0, &mut g);
    } else {
        gemm(x, x.t(), 0.0, &mut g);
    }
    let eig = DMatrix::from_row_slice(n, n, &g).symmetric_eigenvalues();
    let top = eig.iter().cloned().fold(0.0, f64::max);
    let tol = top * (rows.max(cols) as f64) * f64::EPSILON * 10.0;
    let mut s: Vec<f64> = eig.iter().map(|&l| if l > tol { l.sqrt() } else { 0.0 }).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `exp` of the Shannon entropy of the normalized singular values. An
/// all-zero spectrum has effective rank 1.
pub fn erank_from_singular_values(s: &[f64]) -> f64 {
    let top = s.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return 1.0;
    }
    // exp(H) = (sum v / top) * exp(-sum p ln(v / top)), with p = v / sum v.
    // Scaling by the top value keeps r equal values at exactly r.
    let rel: Vec<f64> = s.iter().filter(|&&v| v > 0.0).map(|&v| v / top).collect();
    let total: f64 = rel.iter().sum();
    let log_mean: f64 = rel.iter().map(|&q| (q / total) * q.ln()).sum();
    total * (-log_mean).exp()
}

/// Effective rank of a row-major matrix; columns are mean-centered first
/// when `center` is set.
pub fn effective_rank_of(data: &[f64], rows: usize, cols: usize, center: bool) -> f64 {
    if !center {
        return erank_from_singular_values(&singular_values(data, rows, cols));
    }
    let mut x = data.to_vec();
    for j in 0..cols {
        let m = (0..rows).map(|i| x[i * cols + j]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            x[i * cols + j] -= m;
        }
    }
    erank_from_singular_values(&singular_values(&x, rows, cols))
}

/// Effective rank of the column-centered latent matrix.
pub fn effective_rank(m: &LatentMatrix) -> Result<f64> {
    if m.rows() < 2 {
        return Err(Error::LengthMismatch {
            expected: 2,
            got: m.rows(),
        });
    }
    Ok(effective_rank_of(m.data(), m.rows(), m.cols(), true))
}

/// Encoder outputs of `net` on pre-normalized observations.
pub fn encode(net: &QNetwork, obs: &[Array]) -> Result<LatentMatrix> {
    let mut m = LatentMatrix::new(net.latent_len());
    for (t, o) in obs.iter().enumerate() {
        m.push(t as u64, &net.latents(o.data(), 1)?)?;
    }
    Ok(m)
}

/// Raw observations from a uniform-random-policy rollout, resetting on
/// episode end.
pub fn random_rollout<R: Rng + ?Sized>(env: EnvKind, steps: usize, rng: &mut R) -> Result<Vec<Array>> {
    let mut e = env.make();
    let mut obs = e.reset(rng);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(obs.clone());
        let st = e.step(rng.random_range(0..env.n_actions()))?;
        obs = if st.episode_over() { e.reset(rng) } else { st.obs };
    }
    Ok(out)
}

/// Latents along an ε-greedy rollout of `net`; observations are normalized
/// with frozen statistics.
pub fn latent_rollout<R: Rng + ?Sized>(
    net: &QNetwork,
    env: EnvKind,
    normalizer: Option<&ObsNormalizer>,
    epsilon: f64,
    steps: usize,
    rng: &mut R,
) -> Result<LatentMatrix> {
    let norm = |o: &Array| match normalizer {
        Some(n) => n.apply(o),
        None => o.clone(),
    };
    let mut e = env.make();
    let mut obs = norm(&e.reset(rng));
    let mut m = LatentMatrix::new(net.latent_len());
    for t in 0..steps {
        let z = net.latents(obs.data(), 1)?;
        m.push(t as u64, &z)?;
        let q = net.head_spec.forward_batch(&net.head, &z, 1)?;
        let (a, _) = select_action(&q, epsilon, rng);
        let st = e.step(a)?;
        obs = if st.episode_over() { norm(&e.reset(rng)) } else { norm(&st.obs) };
    }
    Ok(m)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); zero for fewer than two
/// values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Interquartile mean: drop `floor(n / 4)` scores from each end, average the
/// rest.
pub fn iqm(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    mean(&v[cut..v.len() - cut])
}

/// Percentile bootstrap confidence interval of `stat`.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    xs: &[f64],
    stat: fn(&[f64]) -> f64,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> (f64, f64) {
    let n = xs.len();
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let sample: Vec<f64> = (0..n).map(|_| xs[rng.random_range(0..n)]).collect();
            stat(&sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (resamples - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        stats[lo] + (pos - lo as f64) * (stats[hi] - stats[lo])
    };
    let alpha = (1.0 - level) / 2.0;
    (q(alpha), q(1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Component;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// One-sided Jacobi SVD: orthogonalize column pairs until converged.
    fn jacobi_singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| data[i * cols + j]).collect()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..cols {
                for q in p + 1..cols {
                    let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                    let beta: f64 = a[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                    if gamma == 0.0 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let (x, y) = (a[p][i], a[q][i]);
                        a[p][i] = c * x - s * y;
                        a[q][i] = s * x + c * y;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut s: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn centered(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut x = data.to_vec();
        for j in 0..cols {
            let m = (0..rows).map(|i| x[i * cols + j]).sum::<f64>() / rows as f64;
            for i in 0..rows {
                x[i * cols + j] -= m;
            }
        }
        x
    }

    #[test]
    fn equal_singular_values_give_their_count() {
        // r orthogonal columns of equal norm, the rest zero.
        for r in 1..=6 {
            let (rows, cols) = (12, 8);
            let mut x = vec![0.0; rows * cols];
            for j in 0..r {
                x[j * cols + j] = 3.0;
            }
            let e = effective_rank_of(&x, rows, cols, false);
            assert!((e - r as f64).abs() < 1e-9, "r={r} erank={e}");
            assert_eq!(erank_from_singular_values(&vec![0.7; r]), r as f64);
        }
    }

    #[test]
    fn rank_one_and_zero() {
        let x: Vec<f64> = (0..20).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert!((effective_rank_of(&x, 20, 2, true) - 1.0).abs() < 1e-9);
        assert_eq!(effective_rank_of(&[0.0; 12], 4, 3, true), 1.0);
    }

    #[test]
    fn gaussian_matches_jacobi_oracle() {
        let (rows, cols) = (100, 20);
        let x = centered(&gaussian(rows, cols, 1), rows, cols);
        let want = erank_from_singular_values(&jacobi_singular_values(&x, rows, cols));
        let got = effective_rank_of(&gaussian(rows, cols, 1), rows, cols, true);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        let sv = singular_values(&x, rows, cols);
        let js = jacobi_singular_values(&x, rows, cols);
        for (a, b) in sv.iter().zip(&js) {
            assert!((a - b).abs() < 1e-8 * js[0]);
        }
    }

    #[test]
    fn wide_matrix_uses_row_gram() {
        let (rows, cols) = (6, 30);
        let x = gaussian(rows, cols, 4);
        let want = erank_from_singular_values(&jacobi_singular_values(&x, rows, cols));
        assert!((effective_rank_of(&x, rows, cols, false) - want).abs() < 1e-6);
    }

    #[test]
    fn rotation_and_scale_invariance() {
        let (rows, cols) = (50, 6);
        let x = gaussian(rows, cols, 2);
        let base = effective_rank_of(&x, rows, cols, true);
        // Givens rotation of columns 0 and 3, then a global scale.
        let (c, s) = (0.6f64, 0.8f64);
        let mut y = x.clone();
        for i in 0..rows {
            let (a, b) = (x[i * cols], x[i * cols + 3]);
            y[i * cols] = c * a - s * b;
            y[i * cols + 3] = s * a + c * b;
        }
        let scaled: Vec<f64> = y.iter().map(|v| v * 7.5).collect();
        assert!((effective_rank_of(&scaled, rows, cols, true) - base).abs() < 1e-6);
        assert!(base >= 1.0 && base <= cols as f64);
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let empty = LatentMatrix::new(3);
        empty.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "t,dim0,dim1,dim2\n");
        assert_eq!(LatentMatrix::read_csv(&p).unwrap().rows(), 0);

        let m = LatentMatrix::from_rows(4, gaussian(30, 4, 3)).unwrap();
        m.write_csv(&p).unwrap();
        let back = LatentMatrix::read_csv(&p).unwrap();
        assert_eq!(back.rows(), 30);
        let a = effective_rank(&m).unwrap();
        let b = effective_rank(&back).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn cosine_cases() {
        let mut u = ParamTree::new(Component::Other);
        u.insert("a", Array::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let mut v = u.scaled(-1.0);
        assert!((grad_cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!((grad_cosine(&u, &v).unwrap() + 1.0).abs() < 1e-12);
        v.get_mut("a").unwrap().data_mut().copy_from_slice(&[0.3, 0.1, 2.0]);
        let want = (0.3 - 0.2 + 1.0) / ((1.0f64 + 4.0 + 0.25).sqrt() * (0.09f64 + 0.01 + 4.0).sqrt());
        assert!((grad_cosine(&u, &v).unwrap() - want).abs() < 1e-12);
        let z = u.zeros_like();
        assert_eq!(grad_cosine(&u, &z).unwrap(), 0.0);
    }

    #[test]
    fn statistics() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(iqm(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        for f in [mean, median, iqm] {
            assert_eq!(f(&[7.25]), 7.25);
        }
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lo, hi) = bootstrap_ci(&[5.0], mean, 2000, 0.95, &mut rng);
        assert_eq!((lo, hi), (5.0, 5.0));
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let (lo, hi) = bootstrap_ci(&xs, mean, 2000, 0.95, &mut rng);
        assert!(lo < 19.5 && hi > 19.5 && hi - lo < 15.0);
    }

    #[test]
    fn random_rollout_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = random_rollout(EnvKind::BreakoutMini, 300, &mut rng).unwrap();
        assert_eq!(obs.len(), 300);
    }

    proptest! {
        #[test]
        fn erank_bounds(seed in 0u64..1000, rows in 2usize..20, cols in 1usize..8) {
            let x = gaussian(rows, cols, seed);
            let e = effective_rank_of(&x, rows, cols, true);
            prop_assert!(e >= 1.0 - 1e-12 && e <= rows.min(cols) as f64 + 1e-9);
        }

        #[test]
        fn mean_median_match_sorted_oracle(xs in prop::collection::vec(-100.0f64..100.0, 1..50)) {
            let mut s = xs.clone();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            let med = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
            prop_assert!((median(&xs) - med).abs() < 1e-12);
            let m: f64 = s.iter().sum::<f64>() / n as f64;
            prop_assert!((mean(&xs) - m).abs() < 1e-9);
            let c = n / 4;
            let trimmed = &s[c..n - c];
            prop_assert!((iqm(&xs) - trimmed.iter().sum::<f64>() / trimmed.len() as f64).abs() < 1e-9);
        }

        #[test]
        fn cosine_scale_invariant(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4), c in 0.01f64..100.0) {
            let mk = |v: &[f64]| {
                let mut t = ParamTree::new(Component::Other);
                t.insert("x", Array::vector(v.to_vec())).unwrap();
                t
            };
            let (u, v) = (mk(&a), mk(&b));
            let base = grad_cosine(&u, &v).unwrap();
            prop_assert!(base.abs() <= 1.0 + 1e-12);
            if u.norm() > 1e-3 && v.norm() > 1e-3 {
                let s = grad_cosine(&u.scaled(c), &v.scaled(c)).unwrap();
                prop_assert!((s - base).abs() < 1e-9);
            }
        }
    }
}
