//! Hard quadruplet mining inside a mini-batch.
//!
//! 1. `(i, j)`: the least similar positive pair.
//! 2. `k`: the negative most similar to `i`.
//! 3. `l`: among positives of `i` scoring above `S[i][k]`, the least similar.
//!    When none qualifies, the least similar positive of `i` is used and the
//!    quadruplet is flagged.
//!
//! Ties go to the lowest flat index (`i * n + j` for pairs, the index itself
//! otherwise).

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Identity label of each batch position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLabels {
    labels: Vec<usize>,
}

impl BatchLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        BatchLabels { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        i != j && self.labels[i] == self.labels[j]
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.labels[i] != self.labels[j]
    }

    pub fn positives_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.is_positive(i, j))
    }

    pub fn negatives_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.is_negative(i, j))
    }
}

/// A mined `[i, j, l, k]` with the three scores the loss uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruplet {
    pub i: usize,
    pub j: usize,
    pub l: usize,
    pub k: usize,
    pub s_ij: f64,
    pub s_ik: f64,
    pub s_il: f64,
    /// No positive beat the hardest negative; `l` is the unfiltered argmin.
    pub fallback: bool,
}

/// How the local positive `l` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PositiveMining {
    #[default]
    Local,
    /// Ablation: any positive of `i`, uniformly.
    Random,
}

impl PositiveMining {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "local" => Some(PositiveMining::Local),
            "random" => Some(PositiveMining::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PositiveMining::Local => "local",
            PositiveMining::Random => "random",
        }
    }
}

fn check_scores(scores: &[Vec<f64>], labels: &BatchLabels) -> Result<usize> {
    let n = labels.len();
    if scores.len() != n || scores.iter().any(|r| r.len() != n) {
        return Err(Error::dim(format!("score matrix must be {n}x{n}")));
    }
    Ok(n)
}

/// Strict comparisons keep the first (lowest-index) extremum.
fn arg_best(candidates: impl Iterator<Item = usize>, key: impl Fn(usize) -> f64, better: impl Fn(f64, f64) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        let v = key(c);
        if best.is_none_or(|(_, b)| better(v, b)) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

/// Local positive mining over a symmetric score matrix.
pub fn mine_quadruplet(scores: &[Vec<f64>], labels: &BatchLabels) -> Result<Quadruplet> {
    mine_quadruplet_with(scores, labels, PositiveMining::Local, None)
}

/// Mining with a selectable positive rule; `Random` needs an rng.
pub fn mine_quadruplet_with(
    scores: &[Vec<f64>],
    labels: &BatchLabels,
    mode: PositiveMining,
    rng: Option<&mut SeededRng>,
) -> Result<Quadruplet> {
    let n = check_scores(scores, labels)?;
    let pairs = (0..n * n).filter(|&p| labels.is_positive(p / n, p % n));
    let flat = arg_best(pairs, |p| scores[p / n][p % n], |a, b| a < b)
        .ok_or_else(|| Error::data("no positive pair in the batch"))?;
    let (i, j) = (flat / n, flat % n);
    let k = arg_best(labels.negatives_of(i), |k| scores[i][k], |a, b| a > b)
        .ok_or_else(|| Error::data(format!("batch index {i} has no negative")))?;
    let s_ik = scores[i][k];
    let (l, fallback) = match mode {
        PositiveMining::Local => {
            let filtered = labels.positives_of(i).filter(|&l| scores[i][l] > s_ik);
            match arg_best(filtered, |l| scores[i][l], |a, b| a < b) {
                Some(l) => (l, false),
                None => (
                    arg_best(labels.positives_of(i), |l| scores[i][l], |a, b| a < b).unwrap_or(j),
                    true,
                ),
            }
        }
        PositiveMining::Random => {
            let rng = rng.ok_or_else(|| Error::param("random positive mining needs an rng"))?;
            let pos: Vec<usize> = labels.positives_of(i).collect();
            (pos[rng.index(pos.len())], false)
        }
    };
    Ok(Quadruplet {
        i,
        j,
        l,
        k,
        s_ij: scores[i][j],
        s_ik,
        s_il: scores[i][l],
        fallback,
    })
}
