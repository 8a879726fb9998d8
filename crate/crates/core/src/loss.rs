//! Quadruplet margin loss on mined scores, plus the triplet and NCA
//! baselines on feature vectors.

use crate::error::{Error, Result};
use crate::mining::{BatchLabels, Quadruplet};

/// Margins of the two hinge terms; `alpha1 > alpha2 > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            alpha1: 1.0,
            alpha2: 0.5,
        }
    }
}

impl Margins {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        let m = Margins { alpha1, alpha2 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 > self.alpha2 && self.alpha2 > 0.0 && self.alpha1.is_finite() {
            Ok(())
        } else {
            Err(Error::param(format!(
                "margins must satisfy alpha1 > alpha2 > 0, got {} and {}",
                self.alpha1, self.alpha2
            )))
        }
    }
}

/// `max(0, a1 + S_ik - S_ij) + max(0, a2 + S_ik - S_il)`.
pub fn quadruplet_loss(q: &Quadruplet, m: &Margins) -> f64 {
    (m.alpha1 + q.s_ik - q.s_ij).max(0.0) + (m.alpha2 + q.s_ik - q.s_il).max(0.0)
}

/// Subgradient of the quadruplet loss with respect to its three scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreGrad {
    pub d_ij: f64,
    pub d_ik: f64,
    pub d_il: f64,
}

impl ScoreGrad {
    pub fn is_zero(&self) -> bool {
        self.d_ij == 0.0 && self.d_ik == 0.0 && self.d_il == 0.0
    }
}

/// Hinges at exactly zero count as inactive.
pub fn quadruplet_loss_grad(q: &Quadruplet, m: &Margins) -> ScoreGrad {
    let first = m.alpha1 + q.s_ik - q.s_ij > 0.0;
    let second = m.alpha2 + q.s_ik - q.s_il > 0.0;
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    ScoreGrad {
        d_ij: -on(first),
        d_ik: on(first) + on(second),
        d_il: -on(second),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_triplet(labels: Option<&BatchLabels>, (i, j, k): (usize, usize, usize), n: usize) -> Result<()> {
    if i >= n || j >= n || k >= n {
        return Err(Error::dim("triplet index out of range"));
    }
    if let Some(l) = labels {
        if l.label(i) != l.label(j) || l.label(i) == l.label(k) {
            return Err(Error::contract(format!("({i}, {j}, {k}) is not a valid triplet")));
        }
    }
    Ok(())
}

/// Mean over triplets `(i, j, k)` of `max(0, |f_i - f_j|^2 - |f_i - f_k|^2 + alpha)`,
/// the hinge that pushes negatives at least `alpha` further than positives.
pub fn triplet_loss(
    features: &[Vec<f64>],
    triplets: &[(usize, usize, usize)],
    alpha: f64,
    labels: Option<&BatchLabels>,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::data("no triplets"));
    }
    let mut total = 0.0;
    for &t in triplets {
        check_triplet(labels, t, features.len())?;
        let (i, j, k) = t;
        total += (sq_dist(&features[i], &features[j]) - sq_dist(&features[i], &features[k]) + alpha).max(0.0);
    }
    Ok(total / triplets.len() as f64)
}

/// Gradient of [`triplet_loss`] with respect to every feature vector.
pub fn triplet_loss_grad(
    features: &[Vec<f64>],
    triplets: &[(usize, usize, usize)],
    alpha: f64,
) -> Result<Vec<Vec<f64>>> {
    if triplets.is_empty() {
        return Err(Error::data("no triplets"));
    }
    let d = features.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; d]; features.len()];
    let w = 1.0 / triplets.len() as f64;
    for &(i, j, k) in triplets {
        check_triplet(None, (i, j, k), features.len())?;
        let active = sq_dist(&features[i], &features[j]) - sq_dist(&features[i], &features[k]) + alpha > 0.0;
        if !active {
            continue;
        }
        for t in 0..d {
            let (fi, fj, fk) = (features[i][t], features[j][t], features[k][t]);
            grad[i][t] += w * 2.0 * ((fi - fj) - (fi - fk));
            grad[j][t] -= w * 2.0 * (fi - fj);
            grad[k][t] += w * 2.0 * (fi - fk);
        }
    }
    Ok(grad)
}

/// The two triplets `(i, j, k)` and `(i, l, k)` of a quadruplet, unhinged,
/// summed term by term.
pub fn quadruplet_triplet_terms(fi: &[f64], fj: &[f64], fl: &[f64], fk: &[f64], alpha: f64) -> f64 {
    (sq_dist(fi, fj) - sq_dist(fi, fk) + alpha) + (sq_dist(fi, fl) - sq_dist(fi, fk) + alpha)
}

/// Combined form `max(0, |f_i - f_j|^2 + |f_i - f_l|^2 - 2|f_i - f_k|^2 + 2 alpha)`:
/// both triplets share one hinge.
pub fn quadruplet_as_triplets(fi: &[f64], fj: &[f64], fl: &[f64], fk: &[f64], alpha: f64) -> f64 {
    (sq_dist(fi, fj) + sq_dist(fi, fl) - 2.0 * sq_dist(fi, fk) + 2.0 * alpha).max(0.0)
}

/// Mean NCA loss and how many samples were skipped for lacking a
/// same-class partner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NcaLoss {
    pub value: f64,
    pub skipped: usize,
}

/// `(1/N) sum_n -log(sum_{same class, n' != n} k(n, n') / sum_{n' != n} k(n, n'))`
/// with `k = exp(-|f_n - f_n'|^2)`. Self pairs are excluded from both sums;
/// samples without a same-class partner are skipped and counted.
pub fn nca_loss(features: &[Vec<f64>], labels: &BatchLabels) -> Result<NcaLoss> {
    let n = features.len();
    if labels.len() != n {
        return Err(Error::dim("one label per feature vector required"));
    }
    let mut classes: Vec<usize> = labels.labels().to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::data("NCA needs at least two classes"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for a in 0..n {
        if labels.positives_of(a).next().is_none() {
            skipped += 1;
            continue;
        }
        // log-sum-exp over -d^2 for stability
        let logits: Vec<(f64, bool)> = (0..n)
            .filter(|&b| b != a)
            .map(|b| (-sq_dist(&features[a], &features[b]), labels.is_positive(a, b)))
            .collect();
        let top = logits.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        let all: f64 = logits.iter().map(|x| (x.0 - top).exp()).sum();
        let same: f64 = logits.iter().filter(|x| x.1).map(|x| (x.0 - top).exp()).sum();
        total += -(same / all).ln();
        used += 1;
    }
    let value = if used == 0 { 0.0 } else { total / n as f64 };
    Ok(NcaLoss { value, skipped })
}
