//! Learned pair similarity over the absolute difference `e = |f_i - f_j|`
//! and the mean `u = (f_i + f_j) / 2` of two unit feature vectors:
//!
//! ```text
//! e_bar = r(relu(W_e e + b_e))      u_bar = r(relu(W_u u + b_u))
//! c     = relu(W_c [e_bar; u_bar] + b_c)
//! S     = W_s . c + b_s
//! ```
//!
//! with `r(x) = x / |x|`. Both pair statistics are symmetric in their
//! arguments, so `S(f_i, f_j) == S(f_j, f_i)` bit for bit.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{l2_normalize, l2_normalize_backward, Normalized};

const UNIT_TOLERANCE: f64 = 1e-6;

/// All matrices are row-major; `w_c` is `d x 2d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHead {
    pub d: usize,
    pub w_e: Vec<f64>,
    pub b_e: Vec<f64>,
    pub w_u: Vec<f64>,
    pub b_u: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_c: Vec<f64>,
    pub w_s: Vec<f64>,
    pub b_s: f64,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub e: Vec<f64>,
    pub u: Vec<f64>,
    pub pre_e: Vec<f64>,
    pub pre_u: Vec<f64>,
    pub e_bar: Normalized,
    pub u_bar: Normalized,
    pub pre_c: Vec<f64>,
    pub c: Vec<f64>,
    pub score: f64,
}

/// Gradient of `S` with respect to every head parameter and both inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub params: SimilarityHead,
    pub f_i: Vec<f64>,
    pub f_j: Vec<f64>,
}

fn matvec(m: &[f64], x: &[f64], bias: &[f64]) -> Vec<f64> {
    let cols = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `acc += g x^T` for a `g.len() x x.len()` matrix; returns `M^T g`.
fn outer_and_back(m: &[f64], acc: &mut [f64], g: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    let mut back = vec![0.0; cols];
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        let arow = &mut acc[r * cols..(r + 1) * cols];
        for j in 0..cols {
            arow[j] += gr * x[j];
            back[j] += gr * row[j];
        }
    }
    back
}

fn check_unit(f: &[f64], d: usize) -> Result<()> {
    if f.len() != d {
        return Err(Error::dim(format!("expected {d}-d features, got {}", f.len())));
    }
    let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::contract(format!("features must be unit length, norm is {n}")));
    }
    Ok(())
}

/// `(|f_i - f_j|, (f_i + f_j) / 2)` of two unit vectors.
pub fn pair_features(f_i: &[f64], f_j: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_unit(f_i, f_i.len())?;
    check_unit(f_j, f_i.len())?;
    let e = f_i.iter().zip(f_j).map(|(a, b)| (a - b).abs()).collect();
    let u = f_i.iter().zip(f_j).map(|(a, b)| (a + b) / 2.0).collect();
    Ok((e, u))
}

impl SimilarityHead {
    pub fn zeros(d: usize) -> Self {
        SimilarityHead {
            d,
            w_e: vec![0.0; d * d],
            b_e: vec![0.0; d],
            w_u: vec![0.0; d * d],
            b_u: vec![0.0; d],
            w_c: vec![0.0; 2 * d * d],
            b_c: vec![0.0; d],
            w_s: vec![0.0; d],
            b_s: 0.0,
        }
    }

    /// Weights from `N(0, variance)`, zero biases.
    pub fn random(d: usize, variance: f64, rng: &mut SeededRng) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("head dimension must be positive"));
        }
        let sd = variance.sqrt();
        let mut h = Self::zeros(d);
        for w in [&mut h.w_e, &mut h.w_u, &mut h.w_c, &mut h.w_s] {
            w.iter_mut().for_each(|x| *x = sd * rng.normal());
        }
        Ok(h)
    }

    pub fn param_len(&self) -> usize {
        4 * self.d * self.d + 4 * self.d + 1
    }

    /// Flat parameter vector: `w_e, b_e, w_u, b_u, w_c, b_c, w_s, b_s`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for part in [&self.w_e, &self.b_e, &self.w_u, &self.b_u, &self.w_c, &self.b_c, &self.w_s] {
            out.extend_from_slice(part);
        }
        out.push(self.b_s);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::dim(format!(
                "head has {} parameters, got {}",
                self.param_len(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for part in [
            &mut self.w_e,
            &mut self.b_e,
            &mut self.w_u,
            &mut self.b_u,
            &mut self.w_c,
            &mut self.b_c,
            &mut self.w_s,
        ] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        self.b_s = rest[0];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|x| x.is_finite())
    }

    pub fn forward(&self, f_i: &[f64], f_j: &[f64]) -> Result<PairFeatures> {
        check_unit(f_i, self.d)?;
        check_unit(f_j, self.d)?;
        let (e, u) = pair_features(f_i, f_j)?;
        let pre_e = matvec(&self.w_e, &e, &self.b_e);
        let pre_u = matvec(&self.w_u, &u, &self.b_u);
        let e_bar = l2_normalize(&relu(&pre_e));
        let u_bar = l2_normalize(&relu(&pre_u));
        let z: Vec<f64> = e_bar.values.iter().chain(&u_bar.values).copied().collect();
        let pre_c = matvec(&self.w_c, &z, &self.b_c);
        let c = relu(&pre_c);
        let score = self.b_s + self.w_s.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        Ok(PairFeatures {
            e,
            u,
            pre_e,
            pre_u,
            e_bar,
            u_bar,
            pre_c,
            c,
            score,
        })
    }

    pub fn similarity(&self, f_i: &[f64], f_j: &[f64]) -> Result<f64> {
        Ok(self.forward(f_i, f_j)?.score)
    }

    /// Reverse-mode gradient of `S`. Conventions at kinks: `sign(0) = 0`,
    /// `relu'(0) = 0`, and a degenerate normalization passes no gradient.
    pub fn similarity_grad(&self, f_i: &[f64], f_j: &[f64]) -> Result<HeadGrad> {
        let fw = self.forward(f_i, f_j)?;
        Ok(self.backward(&fw, f_i, f_j, 1.0))
    }

    /// Gradient of `scale * S` given a stored forward pass.
    pub fn backward(&self, fw: &PairFeatures, f_i: &[f64], f_j: &[f64], scale: f64) -> HeadGrad {
        let d = self.d;
        let mut g = SimilarityHead::zeros(d);
        g.b_s = scale;
        g.w_s = fw.c.iter().map(|c| scale * c).collect();
        let g_c: Vec<f64> = fw
            .pre_c
            .iter()
            .zip(&self.w_s)
            .map(|(&p, &w)| if p > 0.0 { scale * w } else { 0.0 })
            .collect();
        g.b_c = g_c.clone();
        let z: Vec<f64> = fw.e_bar.values.iter().chain(&fw.u_bar.values).copied().collect();
        let g_z = outer_and_back(&self.w_c, &mut g.w_c, &g_c, &z);

        let branch = |pre: &[f64], bar: &Normalized, g_bar: &[f64]| -> Vec<f64> {
            l2_normalize_backward(bar, g_bar)
                .iter()
                .zip(pre)
                .map(|(&gv, &p)| if p > 0.0 { gv } else { 0.0 })
                .collect::<Vec<f64>>()
        };
        let g_pre_e = branch(&fw.pre_e, &fw.e_bar, &g_z[..d]);
        let g_pre_u = branch(&fw.pre_u, &fw.u_bar, &g_z[d..]);
        g.b_e = g_pre_e.clone();
        g.b_u = g_pre_u.clone();
        let g_e = outer_and_back(&self.w_e, &mut g.w_e, &g_pre_e, &fw.e);
        let g_u = outer_and_back(&self.w_u, &mut g.w_u, &g_pre_u, &fw.u);

        let mut df_i = vec![0.0; d];
        let mut df_j = vec![0.0; d];
        for t in 0..d {
            let s = sign(f_i[t] - f_j[t]);
            df_i[t] = s * g_e[t] + 0.5 * g_u[t];
            df_j[t] = -s * g_e[t] + 0.5 * g_u[t];
        }
        HeadGrad {
            params: g,
            f_i: df_i,
            f_j: df_j,
        }
    }

    /// Scores of every ordered pair; symmetric with an unused diagonal of 0.
    pub fn score_matrix(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = features.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let s = self.similarity(&features[i], &features[j])?;
                out[i][j] = s;
                out[j][i] = s;
            }
        }
        Ok(out)
    }
}

impl HeadGrad {
    /// `acc += self.params` as flat vectors.
    pub fn accumulate_params(&self, acc: &mut [f64]) {
        for (a, g) in acc.iter_mut().zip(self.params.params()) {
            *a += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).values
    }

    #[test]
    fn pair_feature_cases() {
        let mut rng = SeededRng::new(1, 0);
        let f = unit(&mut rng, 5);
        let (e, u) = pair_features(&f, &f).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
        assert_eq!(u, f);
        let g: Vec<f64> = f.iter().map(|x| -x).collect();
        let (_, u) = pair_features(&f, &g).unwrap();
        assert!(u.iter().all(|&x| x == 0.0));
        let h = unit(&mut rng, 5);
        assert_eq!(pair_features(&f, &h).unwrap(), pair_features(&h, &f).unwrap());
        assert!(matches!(pair_features(&[1.0, 1.0], &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_head() {
        let mut h = SimilarityHead::zeros(4);
        h.b_s = 0.7;
        let mut rng = SeededRng::new(2, 0);
        for _ in 0..5 {
            let (a, b) = (unit(&mut rng, 4), unit(&mut rng, 4));
            assert_eq!(h.similarity(&a, &b).unwrap(), 0.7);
            let g = h.similarity_grad(&a, &b).unwrap();
            assert!(g.f_i.iter().chain(&g.f_j).all(|&x| x == 0.0));
            assert_eq!(g.params.b_s, 1.0);
        }
    }

    #[test]
    fn symmetric_bit_for_bit() {
        let mut rng = SeededRng::new(3, 0);
        for _ in 0..50 {
            let h = SimilarityHead::random(16, 0.3, &mut rng).unwrap();
            let (a, b) = (unit(&mut rng, 16), unit(&mut rng, 16));
            assert_eq!(
                h.similarity(&a, &b).unwrap().to_bits(),
                h.similarity(&b, &a).unwrap().to_bits()
            );
        }
    }

    // step-by-step evaluation of a 2-d instance by hand
    #[test]
    fn hand_evaluated_two_dim_instance() {
        let mut h = SimilarityHead::zeros(2);
        h.w_e = vec![1.0, 0.0, 0.0, 1.0];
        h.w_u = vec![1.0, 0.0, 0.0, 1.0];
        // c_0 sums the e-half, c_1 sums the u-half
        h.w_c = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let w = 0.8;
        h.w_s = vec![w, w];
        let s = h.similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        // e = (1, 1), u = (.5, .5); both normalize to (r, r) with r = sqrt(2)/2
        let r = 2f64.sqrt() / 2.0;
        let c = [r + r, r + r];
        let want = w * c[0] + w * c[1];
        assert!((s - want).abs() < 1e-15);
        assert!((s - 2.0 * 2f64.sqrt() * w).abs() < 1e-12);
    }

    #[test]
    fn param_roundtrip() {
        let mut rng = SeededRng::new(4, 0);
        let h = SimilarityHead::random(3, 0.01, &mut rng).unwrap();
        let mut g = SimilarityHead::zeros(3);
        g.set_params(&h.params()).unwrap();
        assert_eq!(g, h);
        assert!(g.set_params(&[0.0]).is_err());
    }

    #[test]
    fn permutation_of_coordinates_and_units() {
        let mut rng = SeededRng::new(5, 0);
        let d = 6;
        let h = SimilarityHead::random(d, 0.5, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        // new index t holds old index perm[t], in every space
        let mut p = SimilarityHead::zeros(d);
        for r in 0..d {
            for s in 0..d {
                p.w_e[r * d + s] = h.w_e[perm[r] * d + perm[s]];
                p.w_u[r * d + s] = h.w_u[perm[r] * d + perm[s]];
                p.w_c[r * 2 * d + s] = h.w_c[perm[r] * 2 * d + perm[s]];
                p.w_c[r * 2 * d + d + s] = h.w_c[perm[r] * 2 * d + d + perm[s]];
            }
            p.b_e[r] = h.b_e[perm[r]];
            p.b_u[r] = h.b_u[perm[r]];
            p.b_c[r] = h.b_c[perm[r]];
            p.w_s[r] = h.w_s[perm[r]];
        }
        p.b_s = h.b_s;
        for _ in 0..10 {
            let (a, b) = (unit(&mut rng, d), unit(&mut rng, d));
            let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
            let s0 = h.similarity(&a, &b).unwrap();
            let s1 = p.similarity(&pa, &pb).unwrap();
            assert!((s0 - s1).abs() < 1e-12);
        }
    }
}
