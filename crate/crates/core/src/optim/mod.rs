//! Stochastic optimizers over finite sums `f(w) = (1/N) sum_n f_n(w)`:
//! SGD, SAGA, q-SAGA, SVRG, neighborhood-sharing N-SAGA, and heavy-ball
//! momentum. Each variant is an [`UpdateRule`] registered by name.

mod bench;
mod knn;
mod rules;

pub use bench::{run_benchmark, run_on, write_trace_csv, BenchSpec, RidgeProblem, TraceRow};
pub use knn::{build_neighborhoods, NeighborhoodIndex};
pub use rules::{
    build_rule, rule_names, Momentum, NSaga, QSaga, RuleParams, Saga, Sgd, Svrg, UpdateRule,
};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// A finite-sum objective with a per-sample gradient oracle.
pub trait FiniteSumProblem {
    /// Number of terms `N`.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize;

    /// `out = f'_n(w)`.
    fn gradient(&self, n: usize, w: &[f64], out: &mut [f64]) -> Result<()>;

    /// Strong-convexity constant of the regularizer.
    fn mu(&self) -> f64;

    /// `f(w) - f(w*)` when the minimizer is known.
    fn suboptimality(&self, _w: &[f64]) -> Option<f64> {
        None
    }
}

/// How the gradient memory starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MemoryInit {
    #[default]
    Zeros,
    /// One pass of per-sample gradients at the initial point.
    FullPass,
}

/// Parameters, gradient memory and bookkeeping shared by every rule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub w: Vec<f64>,
    /// `N x dim`, row `n` is the stored gradient of sample `n`.
    pub memory: Vec<f64>,
    /// Running mean of the memory rows.
    pub mean: Vec<f64>,
    /// Heavy-ball velocity (momentum rule only).
    pub velocity: Vec<f64>,
    pub gamma: f64,
    pub samples: usize,
    /// Steps taken.
    pub t: u64,
    /// Per-sample gradient evaluations, refreshes included.
    pub evaluations: u64,
    pub neighborhoods: Option<NeighborhoodIndex>,
    /// Draws made by the rule itself (refresh indices, SVRG coin).
    pub rng: SeededRng,
}

impl OptimizerState {
    pub fn new(w: Vec<f64>, samples: usize, gamma: f64, rng: SeededRng) -> Result<Self> {
        if samples == 0 || w.is_empty() {
            return Err(Error::param("optimizer needs at least one sample and one parameter"));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::param(format!("step size must be finite and >= 0, got {gamma}")));
        }
        let d = w.len();
        Ok(OptimizerState {
            memory: vec![0.0; samples * d],
            mean: vec![0.0; d],
            velocity: vec![0.0; d],
            w,
            gamma,
            samples,
            t: 0,
            evaluations: 0,
            neighborhoods: None,
            rng,
        })
    }

    /// A state for rules that keep no gradient memory (SGD, momentum); the
    /// table stays empty however large `samples` is.
    pub fn without_memory(w: Vec<f64>, samples: usize, gamma: f64, rng: SeededRng) -> Result<Self> {
        let mut s = OptimizerState::new(w, 1, gamma, rng)?;
        s.memory.clear();
        s.samples = samples.max(1);
        Ok(s)
    }

    pub fn has_memory(&self) -> bool {
        !self.memory.is_empty()
    }

    /// Fresh state sized for `rule`.
    pub fn for_rule(rule: &dyn UpdateRule, w: Vec<f64>, samples: usize, gamma: f64, rng: SeededRng) -> Result<Self> {
        if rule.uses_memory() {
            OptimizerState::new(w, samples, gamma, rng)
        } else {
            OptimizerState::without_memory(w, samples, gamma, rng)
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn memory_row(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.memory[n * d..(n + 1) * d]
    }

    /// Overwrite memory row `n`, keeping the mean in step.
    pub fn store(&mut self, n: usize, grad: &[f64]) {
        let d = self.dim();
        let inv = 1.0 / self.samples as f64;
        let row = &mut self.memory[n * d..(n + 1) * d];
        for ((m, r), g) in self.mean.iter_mut().zip(row.iter_mut()).zip(grad) {
            *m += (g - *r) * inv;
            *r = *g;
        }
    }

    /// Recompute every memory row at the current `w` (costs `N` evaluations).
    pub fn refresh_all(&mut self, problem: &dyn FiniteSumProblem) -> Result<()> {
        let d = self.dim();
        let mut g = vec![0.0; d];
        for n in 0..self.samples {
            problem.gradient(n, &self.w, &mut g)?;
            self.memory[n * d..(n + 1) * d].copy_from_slice(&g);
        }
        self.evaluations += self.samples as u64;
        self.recompute_mean();
        Ok(())
    }

    pub fn init_memory(&mut self, init: MemoryInit, problem: &dyn FiniteSumProblem) -> Result<()> {
        match init {
            MemoryInit::Zeros => Ok(()),
            MemoryInit::FullPass => self.refresh_all(problem),
        }
    }

    /// Arithmetic mean of the memory table, from scratch.
    pub fn fresh_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for row in self.memory.chunks(d) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.samples as f64);
        m
    }

    pub fn recompute_mean(&mut self) {
        self.mean = self.fresh_mean();
    }
}

/// Sample indices uniformly and apply `rule` for `steps` steps.
pub fn run_steps(
    rule: &dyn UpdateRule,
    state: &mut OptimizerState,
    problem: &dyn FiniteSumProblem,
    steps: u64,
    sampler: &mut SeededRng,
) -> Result<()> {
    for _ in 0..steps {
        let n = sampler.index(problem.len());
        rule.step(state, problem, n)?;
    }
    Ok(())
}
