use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Seeded ChaCha stream. `split` derives an independent stream from the same
/// seed, so per-item generators don't depend on iteration order.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream number `stream` of this seed.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_in(lo, hi))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// I.i.d. standard normal matrix of the given shape.
pub fn gaussian_noise(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    rng.normal_matrix(rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_noise(&mut SeededRng::new(1), 100, 1000);
        let (mean, var) = mean_var(m.data());
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn same_seed_same_stream() {
        let a = gaussian_noise(&mut SeededRng::new(42), 10, 10);
        let b = gaussian_noise(&mut SeededRng::new(42), 10, 10);
        assert_eq!(
            a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn different_seeds_are_uncorrelated() {
        let a = gaussian_noise(&mut SeededRng::new(1), 1, 10_000);
        let b = gaussian_noise(&mut SeededRng::new(2), 1, 10_000);
        let (ma, va) = mean_var(a.data());
        let (mb, vb) = mean_var(b.data());
        let cov = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / 10_000.0;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn split_streams_differ_and_reproduce() {
        let root = SeededRng::new(9);
        let a1 = root.split(3).normal_vec(8);
        let a2 = root.split(3).normal_vec(8);
        let b = root.split(4).normal_vec(8);
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }
}
