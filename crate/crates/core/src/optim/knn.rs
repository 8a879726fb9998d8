use crate::error::{Error, Result};

/// `sets[n]` holds the `k` nearest points to `n` (itself first), fixed for a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    pub k: usize,
    pub sets: Vec<Vec<usize>>,
}

impl NeighborhoodIndex {
    pub fn of(&self, n: usize) -> &[usize] {
        &self.sets[n]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Exact Euclidean k-nearest neighbors by brute force. Each point is its own
/// first neighbor; remaining ties go to the lower index.
pub fn build_neighborhoods(points: &[Vec<f64>], k: usize) -> Result<NeighborhoodIndex> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("neighborhood size {k} must be in 1..={n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("points must share a dimension"));
    }
    let sets = (0..n)
        .map(|a| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&b| b != a)
                .map(|b| {
                    let dist: f64 = points[a].iter().zip(&points[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                    (dist, b)
                })
                .collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            std::iter::once(a).chain(others.into_iter().take(k - 1).map(|x| x.1)).collect()
        })
        .collect();
    Ok(NeighborhoodIndex { k, sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn k_one_is_self() {
        let pts = vec![vec![0.0], vec![0.0], vec![1.0]];
        let idx = build_neighborhoods(&pts, 1).unwrap();
        assert_eq!(idx.sets, vec![vec![0], vec![1], vec![2]]);
        assert!(build_neighborhoods(&pts, 4).is_err());
    }

    #[test]
    fn points_on_a_line() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let idx = build_neighborhoods(&pts, 3).unwrap();
        for n in 1..9 {
            let mut s = idx.of(n).to_vec();
            s.sort();
            assert_eq!(s, vec![n - 1, n, n + 1]);
        }
        // tie between 1 and 3 at distance 1 from 2 is broken by index; endpoint
        assert_eq!(idx.of(0), &[0, 1, 2]);
    }

    #[test]
    fn matches_pairwise_distance_oracle() {
        let mut rng = SeededRng::new(3, 0);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let idx = build_neighborhoods(&pts, 6).unwrap();
        for a in 0..40 {
            let mut dists: Vec<(f64, usize)> = (0..40)
                .map(|b| {
                    let mut s = 0.0;
                    for t in 0..3 {
                        s += (pts[a][t] - pts[b][t]).powi(2);
                    }
                    (if a == b { -1.0 } else { s }, b)
                })
                .collect();
            dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let want: Vec<usize> = dists.iter().take(6).map(|x| x.1).collect();
            assert_eq!(idx.of(a), want.as_slice());
        }
    }
}
