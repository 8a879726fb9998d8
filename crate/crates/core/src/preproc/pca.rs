use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::dot;

/// Principal subspace of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `dim x components`, column-major: column `c` is `basis[c * dim..(c + 1) * dim]`.
    pub basis: Vec<f64>,
    pub dim: usize,
    pub components: usize,
    /// Sample-covariance eigenvalue of each retained component, descending.
    pub variances: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn component(&self, c: usize) -> &[f64] {
        &self.basis[c * self.dim..(c + 1) * self.dim]
    }

    /// `basis^T (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::dim(format!(
                "PCA expects {}-d input, got {}",
                self.dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.components)
            .map(|c| dot(self.component(c), &centered))
            .collect())
    }

    /// `mean + basis * z`.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.components {
            return Err(Error::dim("coefficient count does not match components"));
        }
        let mut out = self.mean.clone();
        for (c, &zc) in z.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.component(c)) {
                *o += zc * b;
            }
        }
        Ok(out)
    }

    /// Pull a gradient on the projection back to the input: `basis * g`.
    pub fn project_backward(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, &g) in grad.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.component(c)) {
                *o += g * b;
            }
        }
        out
    }
}

/// Fit the top-`k` principal components of `features`.
///
/// Returns `min(k, dim, rank)` components; eigenvectors are sign-fixed so
/// their largest-magnitude coordinate is positive. When there are fewer
/// samples than dimensions the decomposition runs on the Gram matrix.
pub fn pca_fit(features: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = features.len();
    if n < 2 {
        return Err(Error::data(format!("PCA needs at least 2 samples, got {n}")));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::dim("PCA samples must share a non-zero dimension"));
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| features[i][j] - mean[j]);
    let denom = (n - 1) as f64;

    let (values, vectors): (Vec<f64>, Vec<Vec<f64>>) = if dim <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        order
            .iter()
            .map(|&i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    } else {
        let gram = &centered * centered.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        order
            .iter()
            .map(|&i| {
                let u = eig.eigenvectors.column(i);
                let v = centered.transpose() * u;
                (eig.eigenvalues[i], v.iter().copied().collect())
            })
            .unzip()
    };

    let total_variance = (0..dim)
        .map(|j| centered.column(j).iter().map(|x| x * x).sum::<f64>() / denom)
        .sum::<f64>();
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * 1e-10 * dim.max(n) as f64;
    let rank = values.iter().take_while(|&&v| v > tol && v > 0.0).count();
    let components = k.min(dim).min(rank);

    let mut basis: Vec<f64> = Vec::with_capacity(components * dim);
    for v in vectors.into_iter().take(components) {
        let mut v = v;
        // re-orthogonalize against earlier columns; the Gram route loses a little
        for c in 0..basis.len() / dim {
            let prev = &basis[c * dim..(c + 1) * dim];
            let p = dot(prev, &v);
            for (x, b) in v.iter_mut().zip(prev) {
                *x -= p * b;
            }
        }
        let nv = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        basis.extend(v);
    }
    Ok(PcaModel {
        mean,
        basis,
        dim,
        components,
        variances: values.into_iter().take(components).collect(),
        total_variance,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}
