//! Seeded, resumable random streams.
//!
//! Every consumer of randomness owns its own [`SeededRng`], identified by a
//! `(seed, stream)` pair. The full position in the stream can be captured
//! with [`SeededRng::state`] and restored later, which is what checkpoint
//! resume relies on.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of a [`SeededRng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Distributions that [`sample`] can draw from.
#[derive(Clone, Copy, Debug)]
pub enum Distribution<'a> {
    Bernoulli(f64),
    /// Normal with the given mean and unit variance.
    Gaussian(f64),
    /// Index drawn proportionally to non-negative weights.
    Categorical(&'a [f64]),
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// An independent stream derived from the same seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = SeededRng::new(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param(format!("bernoulli probability {p} outside [0, 1]")));
        }
        Ok(self.uniform() < p)
    }

    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("categorical weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::param("categorical weights sum to zero"));
        }
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return Ok(i);
            }
        }
        // u landed in the rounding gap at the top; take the last positive weight
        Ok(weights.iter().rposition(|&w| w > 0.0).unwrap())
    }

    /// `k` distinct indices from `0..n`, uniformly (partial Fisher-Yates).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Draw one value; categorical draws return the chosen index.
pub fn sample(dist: Distribution<'_>, rng: &mut SeededRng) -> Result<f64> {
    match dist {
        Distribution::Bernoulli(p) => Ok(if rng.bernoulli(p)? { 1.0 } else { 0.0 }),
        Distribution::Gaussian(mean) => Ok(mean + rng.normal()),
        Distribution::Categorical(w) => rng.categorical(w).map(|i| i as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_extremes() {
        let mut rng = SeededRng::new(5, 0);
        for _ in 0..1000 {
            assert_eq!(sample(Distribution::Bernoulli(0.0), &mut rng).unwrap(), 0.0);
            assert_eq!(sample(Distribution::Bernoulli(1.0), &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn bernoulli_rejects_invalid_probability() {
        let mut rng = SeededRng::new(5, 0);
        assert!(matches!(rng.bernoulli(1.5), Err(Error::Parameter(_))));
        assert!(rng.categorical(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn bernoulli_law_of_large_numbers() {
        let mut rng = SeededRng::new(42, 0);
        let n = 100_000;
        let hits: f64 = (0..n)
            .map(|_| sample(Distribution::Bernoulli(0.3), &mut rng).unwrap())
            .sum();
        assert!((hits / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn gaussian_mean_and_categorical_frequencies() {
        let mut rng = SeededRng::new(9, 0);
        let n = 50_000;
        let m: f64 = (0..n)
            .map(|_| sample(Distribution::Gaussian(2.0), &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((m - 2.0).abs() < 0.03);

        let w = [1.0, 0.0, 3.0];
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[rng.categorical(&w).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[2] as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn equal_seeds_give_identical_sequences() {
        let mut a = SeededRng::new(123, 4);
        let mut b = SeededRng::new(123, 4);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(123, 5);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn state_round_trip_resumes_the_stream() {
        let mut a = SeededRng::new(77, 1);
        for _ in 0..37 {
            a.normal();
        }
        let mut b = SeededRng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut rng = SeededRng::new(1, 0);
        let mut v = rng.choose_distinct(20, 7);
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 7);
    }
}
