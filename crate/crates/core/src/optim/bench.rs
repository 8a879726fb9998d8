use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{build_neighborhoods, build_rule, FiniteSumProblem, MemoryInit, OptimizerState, RuleParams};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Ridge least squares, `f_n(w) = (a_n.w - b_n)^2 / 2 + mu |w|^2 / 2`.
#[derive(Clone, Debug)]
pub struct RidgeProblem {
    a: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
    mu: f64,
    w_star: Vec<f64>,
    hessian: DMatrix<f64>,
}

impl RidgeProblem {
    pub fn new(a: Vec<f64>, b: Vec<f64>, dim: usize, mu: f64) -> Result<Self> {
        if dim == 0 || b.is_empty() || a.len() != b.len() * dim {
            return Err(Error::dim(format!(
                "design of {} values does not match {} targets x {dim}",
                a.len(),
                b.len()
            )));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::param(format!("mu must be positive, got {mu}")));
        }
        let n = b.len();
        let am = DMatrix::from_row_slice(n, dim, &a);
        let bv = DVector::from_column_slice(&b);
        let hessian = am.transpose() * &am / n as f64 + DMatrix::identity(dim, dim) * mu;
        let rhs = am.transpose() * bv / n as f64;
        let chol = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::data("ridge Hessian is not positive definite"))?;
        let w_star = chol.solve(&rhs).iter().copied().collect();
        Ok(RidgeProblem {
            a,
            b,
            dim,
            mu,
            w_star,
            hessian,
        })
    }

    /// Rows drawn around `clusters` Gaussian centers. Targets follow a random
    /// linear model plus a per-cluster offset of scale `noise`; rows and
    /// targets jitter by `spread` inside a cluster. Members of a cluster thus
    /// have nearly equal gradients while clusters disagree strongly.
    pub fn clustered(
        samples: usize,
        dim: usize,
        clusters: usize,
        spread: f64,
        noise: f64,
        mu: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if clusters == 0 || clusters > samples {
            return Err(Error::param(format!("cluster count {clusters} must be in 1..={samples}")));
        }
        let centers: Vec<f64> = (0..clusters * dim).map(|_| rng.normal()).collect();
        let offsets: Vec<f64> = (0..clusters).map(|_| noise * rng.normal()).collect();
        let truth: Vec<f64> = (0..dim).map(|_| rng.normal() / (dim as f64).sqrt()).collect();
        let mut a = Vec::with_capacity(samples * dim);
        let mut b = Vec::with_capacity(samples);
        for n in 0..samples {
            let c = n % clusters;
            let row: Vec<f64> = (0..dim).map(|t| centers[c * dim + t] + spread * rng.normal()).collect();
            let y: f64 = row.iter().zip(&truth).map(|(x, w)| x * w).sum::<f64>() + offsets[c] + spread * rng.normal();
            a.extend_from_slice(&row);
            b.push(y);
        }
        Self::new(a, b, dim, mu)
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.w_star
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.a[n * self.dim..(n + 1) * self.dim]
    }

    /// `[a_n, b_n]`, the points neighborhoods are built on.
    pub fn features(&self) -> Vec<Vec<f64>> {
        (0..self.b.len())
            .map(|n| {
                let mut p = self.row(n).to_vec();
                p.push(self.b[n]);
                p
            })
            .collect()
    }

    /// Full objective value.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let n = self.b.len();
        let data: f64 = (0..n)
            .map(|i| {
                let r: f64 = self.row(i).iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - self.b[i];
                0.5 * r * r
            })
            .sum::<f64>()
            / n as f64;
        data + 0.5 * self.mu * w.iter().map(|x| x * x).sum::<f64>()
    }
}

impl FiniteSumProblem for RidgeProblem {
    fn len(&self) -> usize {
        self.b.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient(&self, n: usize, w: &[f64], out: &mut [f64]) -> Result<()> {
        if n >= self.b.len() || w.len() != self.dim || out.len() != self.dim {
            return Err(Error::dim(format!("gradient of sample {n} with w of length {}", w.len())));
        }
        let row = self.row(n);
        let r: f64 = row.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - self.b[n];
        for ((o, x), wt) in out.iter_mut().zip(row).zip(w) {
            *o = r * x + self.mu * wt;
        }
        Ok(())
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    /// Exact for a quadratic: `(w - w*)' H (w - w*) / 2`.
    fn suboptimality(&self, w: &[f64]) -> Option<f64> {
        let e = DVector::from_iterator(self.dim, w.iter().zip(&self.w_star).map(|(a, b)| a - b));
        Some(0.5 * e.dot(&(&self.hessian * &e)).max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub variant: String,
    pub q: usize,
    pub k: usize,
    /// q-SAGA: refresh the sampled index itself.
    pub forced: bool,
    pub mu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub samples: usize,
    pub dim: usize,
    pub clusters: usize,
    pub spread: f64,
    pub noise: f64,
    /// Evaluations between trace rows.
    pub log_every: u64,
    pub memory_init: MemoryInit,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            variant: "saga".into(),
            q: 1,
            k: 10,
            forced: false,
            mu: 0.1,
            epochs: 30,
            seed: 0,
            samples: 1000,
            dim: 20,
            clusters: 100,
            spread: 0.05,
            noise: 1.0,
            log_every: 50,
            memory_init: MemoryInit::Zeros,
        }
    }
}

impl BenchSpec {
    pub fn problem(&self) -> Result<RidgeProblem> {
        let mut rng = SeededRng::new(self.seed, 0);
        RidgeProblem::clustered(self.samples, self.dim, self.clusters, self.spread, self.noise, self.mu, &mut rng)
    }

    /// `gamma = q / (mu N)`.
    pub fn step_size(&self) -> f64 {
        self.q.max(1) as f64 / (self.mu * self.samples as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub evaluations: u64,
    pub suboptimality: f64,
    pub wall_seconds: f64,
}

/// Run one variant until `epochs * N` gradient evaluations are spent,
/// logging suboptimality every `log_every` evaluations.
pub fn run_benchmark(spec: &BenchSpec) -> Result<Vec<TraceRow>> {
    let problem = spec.problem()?;
    let (trace, _) = run_on(&problem, spec)?;
    Ok(trace)
}

/// As [`run_benchmark`] on a prebuilt problem; also returns the final iterate.
pub fn run_on(problem: &RidgeProblem, spec: &BenchSpec) -> Result<(Vec<TraceRow>, Vec<f64>)> {
    if spec.log_every == 0 {
        return Err(Error::param("log interval must be positive"));
    }
    let params = RuleParams {
        q: spec.q,
        k: spec.k,
        forced: spec.forced,
        ..RuleParams::default()
    };
    let rule = build_rule(&spec.variant, &params)?;
    let mut state = OptimizerState::new(
        vec![0.0; problem.dim()],
        problem.len(),
        spec.step_size(),
        SeededRng::new(spec.seed, 2),
    )?;
    if spec.variant == "nsaga" {
        state.neighborhoods = Some(build_neighborhoods(&problem.features(), spec.k)?);
    }
    state.init_memory(spec.memory_init, problem)?;
    let mut sampler = SeededRng::new(spec.seed, 1);
    let budget = spec.epochs as u64 * problem.len() as u64;
    let start = Instant::now();
    let sub = |w: &[f64]| problem.suboptimality(w).unwrap_or(f64::NAN);
    let mut trace = vec![TraceRow {
        evaluations: state.evaluations,
        suboptimality: sub(&state.w),
        wall_seconds: 0.0,
    }];
    let mut next_log = state.evaluations + spec.log_every;
    while state.evaluations < budget {
        let n = sampler.index(problem.len());
        rule.step(&mut state, problem, n)?;
        if state.evaluations >= next_log || state.evaluations >= budget {
            trace.push(TraceRow {
                evaluations: state.evaluations,
                suboptimality: sub(&state.w),
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            while next_log <= state.evaluations {
                next_log += spec.log_every;
            }
        }
        if !state.w.iter().all(|x| x.is_finite()) {
            return Err(Error::data(format!("{} diverged after {} steps", spec.variant, state.t)));
        }
    }
    Ok((trace, state.w))
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "evaluations,suboptimality,wall_seconds")?;
    for r in trace {
        writeln!(out, "{},{},{}", r.evaluations, r.suboptimality, r.wall_seconds)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizer_zeroes_full_gradient() {
        let mut rng = SeededRng::new(1, 0);
        let p = RidgeProblem::clustered(50, 4, 5, 0.2, 0.3, 0.1, &mut rng).unwrap();
        let mut total = vec![0.0; 4];
        let mut g = vec![0.0; 4];
        for n in 0..50 {
            p.gradient(n, p.minimizer(), &mut g).unwrap();
            total.iter_mut().zip(&g).for_each(|(t, x)| *t += x / 50.0);
        }
        assert!(total.iter().all(|x| x.abs() < 1e-12));
        assert!(p.suboptimality(p.minimizer()).unwrap() < 1e-12);
    }

    #[test]
    fn suboptimality_matches_objective_gap() {
        let mut rng = SeededRng::new(2, 0);
        let p = RidgeProblem::clustered(40, 3, 4, 0.3, 0.5, 0.2, &mut rng).unwrap();
        let f_star = p.objective(p.minimizer());
        for _ in 0..20 {
            let w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let gap = p.objective(&w) - f_star;
            let s = p.suboptimality(&w).unwrap();
            assert!(s >= 0.0);
            assert!((gap - s).abs() < 1e-10 * (1.0 + gap.abs()));
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = SeededRng::new(3, 0);
        let p = RidgeProblem::clustered(10, 3, 2, 0.3, 0.5, 0.1, &mut rng).unwrap();
        let w = [0.3, -0.2, 0.5];
        let mut g = vec![0.0; 3];
        p.gradient(4, &w, &mut g).unwrap();
        let f = |w: &[f64]| {
            let r: f64 = p.row(4).iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - p.b[4];
            0.5 * r * r + 0.05 * w.iter().map(|x| x * x).sum::<f64>()
        };
        for t in 0..3 {
            let (mut up, mut dn) = (w, w);
            up[t] += 1e-6;
            dn[t] -= 1e-6;
            assert!(((f(&up) - f(&dn)) / 2e-6 - g[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn trace_is_deterministic_apart_from_wall_clock() {
        let spec = BenchSpec {
            samples: 100,
            dim: 5,
            clusters: 10,
            epochs: 3,
            log_every: 20,
            ..BenchSpec::default()
        };
        let strip = |t: Vec<TraceRow>| t.into_iter().map(|r| (r.evaluations, r.suboptimality.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(run_benchmark(&spec).unwrap()), strip(run_benchmark(&spec).unwrap()));
    }

    #[test]
    fn refreshes_are_billed() {
        let spec = BenchSpec {
            variant: "qsaga".into(),
            q: 4,
            samples: 100,
            dim: 5,
            clusters: 10,
            epochs: 2,
            log_every: 10,
            ..BenchSpec::default()
        };
        let trace = run_benchmark(&spec).unwrap();
        // each step costs 1 + up to 4 evaluations
        assert!(trace.windows(2).all(|w| w[1].evaluations > w[0].evaluations));
        assert!(trace.last().unwrap().evaluations >= 200);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = [TraceRow {
            evaluations: 5,
            suboptimality: 0.25,
            wall_seconds: 0.0,
        }];
        write_trace_csv(&path, &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "evaluations,suboptimality,wall_seconds\n5,0.25,0\n"
        );
    }
}
