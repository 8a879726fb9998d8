use super::{FiniteSumProblem, OptimizerState};
use crate::error::{Error, Result};

/// One optimizer variant. `n` is the sampled index of this step.
pub trait UpdateRule: Send + Sync {
    fn name(&self) -> &str;

    /// Whether the rule reads or writes the per-sample gradient table.
    fn uses_memory(&self) -> bool {
        true
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()>;
}

/// Knobs a rule may read when built from the registry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuleParams {
    pub q: usize,
    pub k: usize,
    pub beta: f64,
    /// q-SAGA only: refresh exactly the sampled index instead of random ones.
    pub forced: bool,
}

impl Default for RuleParams {
    fn default() -> Self {
        RuleParams {
            q: 1,
            k: 10,
            beta: 0.9,
            forced: false,
        }
    }
}

fn check_index(state: &OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
    if n >= problem.len() || problem.len() != state.samples || problem.dim() != state.dim() {
        return Err(Error::dim(format!(
            "index {n} / problem {}x{} does not fit optimizer state {}x{}",
            problem.len(),
            problem.dim(),
            state.samples,
            state.dim()
        )));
    }
    Ok(())
}

fn check_memory(state: &OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
    check_index(state, problem, n)?;
    if state.memory.len() != state.samples * state.dim() {
        return Err(Error::contract("this rule needs a gradient memory table"));
    }
    Ok(())
}

fn eval(state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<Vec<f64>> {
    let mut g = vec![0.0; state.dim()];
    problem.gradient(n, &state.w, &mut g)?;
    state.evaluations += 1;
    Ok(g)
}

/// `w -= gamma * (g - memory[n] + mean)`.
fn corrected_step(state: &mut OptimizerState, n: usize, g: &[f64]) {
    let d = state.dim();
    let gamma = state.gamma;
    for t in 0..d {
        let dir = g[t] - state.memory[n * d + t] + state.mean[t];
        state.w[t] -= gamma * dir;
    }
}

/// Plain SGD; `decreasing` uses `gamma_t = gamma / (1 + t mu gamma)`.
pub struct Sgd {
    pub decreasing: bool,
}

impl UpdateRule for Sgd {
    fn uses_memory(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        if self.decreasing {
            "sgd"
        } else {
            "sgd-const"
        }
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
        check_index(state, problem, n)?;
        let g = eval(state, problem, n)?;
        let gamma = if self.decreasing {
            state.gamma / (1.0 + state.t as f64 * problem.mu() * state.gamma)
        } else {
            state.gamma
        };
        for (w, gv) in state.w.iter_mut().zip(&g) {
            *w -= gamma * gv;
        }
        state.t += 1;
        Ok(())
    }
}

pub struct Saga;

impl UpdateRule for Saga {
    fn name(&self) -> &str {
        "saga"
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
        check_memory(state, problem, n)?;
        let g = eval(state, problem, n)?;
        corrected_step(state, n, &g);
        state.store(n, &g);
        state.t += 1;
        Ok(())
    }
}

/// SAGA step, then `q` distinct memory slots refreshed at the pre-step point.
pub struct QSaga {
    pub q: usize,
    pub forced: bool,
}

impl UpdateRule for QSaga {
    fn name(&self) -> &str {
        "qsaga"
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
        check_memory(state, problem, n)?;
        if self.q == 0 || self.q > state.samples {
            return Err(Error::param(format!("q must be in 1..={}", state.samples)));
        }
        let w_pre = state.w.clone();
        let g = eval(state, problem, n)?;
        let targets = if self.forced {
            if self.q != 1 {
                return Err(Error::param("forced refresh is defined for q = 1 only"));
            }
            vec![n]
        } else {
            let samples = state.samples;
            state.rng.choose_distinct(samples, self.q)
        };
        corrected_step(state, n, &g);
        let mut fresh = vec![0.0; state.dim()];
        for j in targets {
            if j == n {
                state.store(n, &g);
            } else {
                problem.gradient(j, &w_pre, &mut fresh)?;
                state.evaluations += 1;
                state.store(j, &fresh);
            }
        }
        state.t += 1;
        Ok(())
    }
}

/// With probability `q / N` refresh the whole memory first; memory is
/// otherwise left alone.
pub struct Svrg {
    pub q: usize,
}

impl UpdateRule for Svrg {
    fn name(&self) -> &str {
        "svrg"
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
        check_memory(state, problem, n)?;
        let r = state.rng.uniform();
        if r < self.q as f64 / state.samples as f64 {
            state.refresh_all(problem)?;
        }
        let g = eval(state, problem, n)?;
        corrected_step(state, n, &g);
        state.t += 1;
        Ok(())
    }
}

/// SAGA whose single gradient is written into every neighbor's slot.
pub struct NSaga;

impl UpdateRule for NSaga {
    fn name(&self) -> &str {
        "nsaga"
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
        check_memory(state, problem, n)?;
        let targets = state
            .neighborhoods
            .as_ref()
            .ok_or_else(|| Error::contract("N-SAGA needs a neighborhood index"))?
            .sets
            .get(n)
            .cloned()
            .ok_or_else(|| Error::contract(format!("no neighborhood for sample {n}")))?;
        let g = eval(state, problem, n)?;
        corrected_step(state, n, &g);
        for j in targets {
            state.store(j, &g);
        }
        state.t += 1;
        Ok(())
    }
}

/// Heavy ball: `v = beta v - gamma g`, `w += v`.
pub struct Momentum {
    pub beta: f64,
}

impl UpdateRule for Momentum {
    fn uses_memory(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "momentum"
    }

    fn step(&self, state: &mut OptimizerState, problem: &dyn FiniteSumProblem, n: usize) -> Result<()> {
        check_index(state, problem, n)?;
        let g = eval(state, problem, n)?;
        let gamma = state.gamma;
        for ((w, v), gv) in state.w.iter_mut().zip(state.velocity.iter_mut()).zip(&g) {
            *v = self.beta * *v - gamma * gv;
            *w += *v;
        }
        state.t += 1;
        Ok(())
    }
}

type Builder = fn(&RuleParams) -> Box<dyn UpdateRule>;

const REGISTRY: &[(&str, Builder)] = &[
    ("sgd", |_| Box::new(Sgd { decreasing: true })),
    ("sgd-const", |_| Box::new(Sgd { decreasing: false })),
    ("saga", |_| Box::new(Saga)),
    ("qsaga", |p| Box::new(QSaga { q: p.q, forced: p.forced })),
    ("svrg", |p| Box::new(Svrg { q: p.q })),
    ("nsaga", |_| Box::new(NSaga)),
    ("momentum", |p| Box::new(Momentum { beta: p.beta })),
];

pub fn rule_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Look up a rule by its registered name.
pub fn build_rule(name: &str, params: &RuleParams) -> Result<Box<dyn UpdateRule>> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| b(params))
        .ok_or_else(|| {
            Error::param(format!("unknown optimizer {name:?}; known: {}", rule_names().join(", ")))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{build_neighborhoods, MemoryInit, RidgeProblem};
    use crate::rng::SeededRng;

    /// `f(w) = (w - a)^2 / 2` as a one-term sum.
    struct Parabola(f64);

    impl FiniteSumProblem for Parabola {
        fn len(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn gradient(&self, _n: usize, w: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = w[0] - self.0;
            Ok(())
        }
        fn mu(&self) -> f64 {
            1.0
        }
    }

    fn state(p: &dyn FiniteSumProblem, gamma: f64) -> OptimizerState {
        OptimizerState::new(vec![0.0; p.dim()], p.len(), gamma, SeededRng::new(1, 7)).unwrap()
    }

    fn small_ridge(seed: u64) -> RidgeProblem {
        RidgeProblem::clustered(60, 5, 12, 0.1, 0.5, 0.1, &mut SeededRng::new(seed, 0)).unwrap()
    }

    #[test]
    fn registry_lookup() {
        for name in rule_names() {
            assert_eq!(build_rule(name, &RuleParams::default()).unwrap().name(), name);
        }
        assert!(build_rule("adam", &RuleParams::default()).is_err());
    }

    #[test]
    fn sgd_cases() {
        let p = Parabola(3.0);
        let mut s = state(&p, 1.0);
        Sgd { decreasing: false }.step(&mut s, &p, 0).unwrap();
        assert_eq!(s.w, vec![3.0]);
        Sgd { decreasing: true }.step(&mut s, &p, 0).unwrap();
        assert_eq!(s.w, vec![3.0]);
    }

    #[test]
    fn saga_first_visit_is_sgd_and_memory_contract() {
        let p = small_ridge(1);
        let mut a = state(&p, 0.01);
        let mut b = state(&p, 0.01);
        Saga.step(&mut a, &p, 4).unwrap();
        Sgd { decreasing: false }.step(&mut b, &p, 4).unwrap();
        assert_eq!(a.w, b.w);

        let mut g = vec![0.0; 5];
        p.gradient(9, &a.w, &mut g).unwrap();
        Saga.step(&mut a, &p, 9).unwrap();
        assert_eq!(a.memory_row(9), g.as_slice());
    }

    fn trajectory(rule: &dyn UpdateRule, p: &RidgeProblem, k: Option<usize>) -> Vec<Vec<f64>> {
        let mut s = state(p, 0.05);
        if let Some(k) = k {
            s.neighborhoods = Some(build_neighborhoods(&p.features(), k).unwrap());
        }
        let mut sampler = SeededRng::new(5, 0);
        (0..500)
            .map(|_| {
                rule.step(&mut s, p, sampler.index(p.len())).unwrap();
                s.w.clone()
            })
            .collect()
    }

    #[test]
    fn degenerate_variants_match_saga_bitwise() {
        let p = small_ridge(2);
        let saga = trajectory(&Saga, &p, None);
        assert_eq!(trajectory(&NSaga, &p, Some(1)), saga);
        assert_eq!(trajectory(&QSaga { q: 1, forced: true }, &p, None), saga);
    }

    #[test]
    fn mean_stays_consistent() {
        let p = small_ridge(3);
        let mut sampler = SeededRng::new(9, 0);
        for rule in [
            build_rule("saga", &RuleParams::default()).unwrap(),
            build_rule("qsaga", &RuleParams { q: 5, ..RuleParams::default() }).unwrap(),
            build_rule("svrg", &RuleParams { q: 3, ..RuleParams::default() }).unwrap(),
            build_rule("nsaga", &RuleParams::default()).unwrap(),
        ] {
            let mut s = state(&p, 0.02);
            s.neighborhoods = Some(build_neighborhoods(&p.features(), 4).unwrap());
            for _ in 0..400 {
                rule.step(&mut s, &p, sampler.index(60)).unwrap();
                let fresh = s.fresh_mean();
                for (a, b) in fresh.iter().zip(&s.mean) {
                    assert!((a - b).abs() < 1e-10);
                }
                // centered memory sums to zero
                for t in 0..5 {
                    let sum: f64 = (0..60).map(|n| s.memory_row(n)[t] - s.mean[t]).sum();
                    assert!(sum.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn full_refresh_q_equals_n() {
        let p = small_ridge(4);
        let mut s = state(&p, 0.02);
        let rule = QSaga { q: 60, forced: false };
        let mut sampler = SeededRng::new(1, 0);
        for _ in 0..20 {
            let w_pre = s.w.clone();
            rule.step(&mut s, &p, sampler.index(60)).unwrap();
            let mut g = vec![0.0; 5];
            for n in 0..60 {
                p.gradient(n, &w_pre, &mut g).unwrap();
                assert_eq!(s.memory_row(n), g.as_slice());
            }
        }
        assert_eq!(s.evaluations, 20 * 60);
    }

    #[test]
    fn qsaga_refresh_frequency() {
        let p = small_ridge(5);
        let mut s = state(&p, 0.0);
        let rule = QSaga { q: 6, forced: false };
        let iters = 100_000;
        let mut hits = vec![0usize; 60];
        let mut sampler = SeededRng::new(2, 0);
        for _ in 0..iters {
            // w never moves at gamma 0; clear the table so refreshed rows stand out
            s.memory.iter_mut().for_each(|x| *x = 0.0);
            s.mean.iter_mut().for_each(|x| *x = 0.0);
            rule.step(&mut s, &p, sampler.index(60)).unwrap();
            for (n, h) in hits.iter_mut().enumerate() {
                if s.memory_row(n).iter().any(|&x| x != 0.0) {
                    *h += 1;
                }
            }
        }
        for h in hits {
            assert!((h as f64 / iters as f64 - 0.1).abs() < 0.01);
        }
    }

    #[test]
    fn svrg_cases() {
        let p = small_ridge(6);
        // q = 0: never refreshes, zero memory => plain SGD
        let mut a = state(&p, 0.01);
        let mut b = state(&p, 0.01);
        let mut sampler = SeededRng::new(3, 0);
        for _ in 0..100 {
            let n = sampler.index(60);
            Svrg { q: 0 }.step(&mut a, &p, n).unwrap();
            Sgd { decreasing: false }.step(&mut b, &p, n).unwrap();
        }
        assert_eq!(a.w, b.w);
        assert!(a.memory.iter().all(|&m| m == 0.0));

        // refreshed at the optimum the step vanishes
        let mut s = state(&p, 0.5);
        s.w = p.minimizer().to_vec();
        s.refresh_all(&p).unwrap();
        Svrg { q: 0 }.step(&mut s, &p, 17).unwrap();
        for (w, ws) in s.w.iter().zip(p.minimizer()) {
            assert!((w - ws).abs() < 1e-10);
        }
    }

    #[test]
    fn nsaga_shares_one_gradient() {
        let p = small_ridge(7);
        let mut s = state(&p, 0.01);
        s.neighborhoods = Some(build_neighborhoods(&p.features(), 5).unwrap());
        s.init_memory(MemoryInit::FullPass, &p).unwrap();
        NSaga.step(&mut s, &p, 11).unwrap();
        let hood = s.neighborhoods.as_ref().unwrap().of(11).to_vec();
        for j in &hood {
            assert_eq!(s.memory_row(*j), s.memory_row(11));
        }
        let mut bare = state(&p, 0.01);
        assert!(matches!(NSaga.step(&mut bare, &p, 0), Err(Error::Contract(_))));
    }
}
