//! Dense row-major tensors and the handful of numeric kernels the rest of
//! the crate is built on: 2-D valid/full correlation, kernel flipping,
//! ReLU and unit-norm projection.
//!
//! Indexing is 0-based throughout. The 1-based sums of the CRBM energy
//! (offsets `i + r - 1`) become `i + r` here.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// A 1-D tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w)),
            s => Err(Error::dim(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Channels, rows and columns of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::dim(format!("expected a 3-D tensor, got shape {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    /// Borrow the `i`-th slice along the leading axis.
    pub fn slab(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Copy of the `i`-th leading slice as its own tensor.
    pub fn slab_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.slab(i).to_vec(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Valid-mode 2-D correlation over raw row-major buffers, accumulated into `out`.
///
/// `out[i, j] += sum_{r, s} kernel[r, s] * input[i + r, j + s]`, with `out`
/// of size `(ih - kh + 1) x (iw - kw + 1)`.
pub(crate) fn correlate_valid_acc(
    input: &[f64],
    (ih, iw): (usize, usize),
    kernel: &[f64],
    (kh, kw): (usize, usize),
    out: &mut [f64],
) {
    let oh = ih - kh + 1;
    let ow = iw - kw + 1;
    debug_assert_eq!(out.len(), oh * ow);
    for i in 0..oh {
        let out_row = &mut out[i * ow..(i + 1) * ow];
        for r in 0..kh {
            let in_row = &input[(i + r) * iw..(i + r + 1) * iw];
            for s in 0..kw {
                let k = kernel[r * kw + s];
                if k == 0.0 {
                    continue;
                }
                for (o, x) in out_row.iter_mut().zip(&in_row[s..s + ow]) {
                    *o += k * x;
                }
            }
        }
    }
}

/// Full-mode (zero-padded) 2-D correlation accumulated into `out`:
/// `out[p, q] += sum_{r, s} kernel[r, s] * input[p + r - (kh - 1), q + s - (kw - 1)]`.
///
/// This is the adjoint of [`correlate_valid_acc`] with a 180-degree flipped
/// kernel. Zero input rows are skipped, which makes sparse binary inputs cheap.
pub(crate) fn correlate_full_acc(
    input: &[f64],
    (ih, iw): (usize, usize),
    kernel: &[f64],
    (kh, kw): (usize, usize),
    out: &mut [f64],
) {
    let ow = iw + kw - 1;
    debug_assert_eq!(out.len(), (ih + kh - 1) * ow);
    for a in 0..ih {
        let in_row = &input[a * iw..(a + 1) * iw];
        if in_row.iter().all(|&x| x == 0.0) {
            continue;
        }
        for r in 0..kh {
            let p = a + kh - 1 - r;
            let out_row = &mut out[p * ow..(p + 1) * ow];
            for s in 0..kw {
                let k = kernel[r * kw + s];
                if k == 0.0 {
                    continue;
                }
                let q0 = kw - 1 - s;
                for (o, x) in out_row[q0..q0 + iw].iter_mut().zip(in_row) {
                    *o += k * x;
                }
            }
        }
    }
}

/// Valid-mode correlation: output is `(H - h + 1) x (W - w + 1)`.
pub fn conv_valid(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (ih, iw) = input.dims2()?;
    let (kh, kw) = kernel.dims2()?;
    if kh > ih || kw > iw {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than input {ih}x{iw}"
        )));
    }
    let mut out = Tensor::zeros(&[ih - kh + 1, iw - kw + 1]);
    correlate_valid_acc(&input.data, (ih, iw), &kernel.data, (kh, kw), &mut out.data);
    Ok(out)
}

/// Full-mode zero-padded correlation: output is `(H + h - 1) x (W + w - 1)`.
///
/// For matching shapes, `<conv_valid(a, flip180(k)), b> == <a, conv_full(b, k)>`.
pub fn conv_full(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (ih, iw) = input.dims2()?;
    let (kh, kw) = kernel.dims2()?;
    let mut out = Tensor::zeros(&[ih + kh - 1, iw + kw - 1]);
    correlate_full_acc(&input.data, (ih, iw), &kernel.data, (kh, kw), &mut out.data);
    Ok(out)
}

pub(crate) fn flip180_slice(kernel: &[f64]) -> Vec<f64> {
    kernel.iter().rev().copied().collect()
}

/// Rotate a 2-D kernel by 180 degrees.
pub fn flip180(kernel: &Tensor) -> Result<Tensor> {
    kernel.dims2()?;
    Ok(Tensor {
        shape: kernel.shape.clone(),
        data: flip180_slice(&kernel.data),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Result of projecting a vector onto the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Norm of the input before projection.
    pub norm: f64,
    /// Set when the input was the zero vector; `values` is then all zeros.
    pub degenerate: bool,
}

/// `x / ||x||`, or the zero vector with `degenerate` set when `x = 0`.
pub fn l2_normalize(x: &[f64]) -> Normalized {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Normalized {
            values: vec![0.0; x.len()],
            norm: n,
            degenerate: true,
        };
    }
    Normalized {
        values: x.iter().map(|v| v / n).collect(),
        norm: n,
        degenerate: false,
    }
}

/// Pull a gradient back through `l2_normalize`: `(I - y y^T) g / ||x||`.
/// Degenerate inputs pass no gradient.
pub fn l2_normalize_backward(out: &Normalized, grad: &[f64]) -> Vec<f64> {
    if out.degenerate {
        return vec![0.0; grad.len()];
    }
    let proj = dot(&out.values, grad);
    out.values
        .iter()
        .zip(grad)
        .map(|(y, g)| (g - y * proj) / out.norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
    }

    fn brute_valid(x: &Tensor, k: &Tensor) -> Tensor {
        let (h, w) = x.dims2().unwrap();
        let (kh, kw) = k.dims2().unwrap();
        let mut out = Tensor::zeros(&[h - kh + 1, w - kw + 1]);
        for i in 0..h - kh + 1 {
            for j in 0..w - kw + 1 {
                let mut acc = 0.0;
                for r in 0..kh {
                    for s in 0..kw {
                        acc += k.get(&[r, s]) * x.get(&[i + r, j + s]);
                    }
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    fn brute_full(x: &Tensor, k: &Tensor) -> Tensor {
        let (h, w) = x.dims2().unwrap();
        let (kh, kw) = k.dims2().unwrap();
        let mut padded = Tensor::zeros(&[h + 2 * (kh - 1), w + 2 * (kw - 1)]);
        for i in 0..h {
            for j in 0..w {
                padded.set(&[i + kh - 1, j + kw - 1], x.get(&[i, j]));
            }
        }
        brute_valid(&padded, k)
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn conv_valid_constant_and_identity() {
        let out = conv_valid(&Tensor::filled(&[3, 3], 1.0), &Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert_eq!(out, Tensor::filled(&[2, 2], 4.0));

        let mut rng = SeededRng::new(1, 0);
        let x = random(&[4, 5], &mut rng);
        let id = Tensor::filled(&[1, 1], 1.0);
        assert_eq!(conv_valid(&x, &id).unwrap(), x);
        assert_eq!(conv_full(&x, &id).unwrap(), x);
    }

    #[test]
    fn conv_valid_rejects_oversized_kernel() {
        let err = conv_valid(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3, 1]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = SeededRng::new(7, 0);
        let x = random(&[5, 5], &mut rng);
        let k = random(&[3, 3], &mut rng);
        assert_close(&conv_valid(&x, &k).unwrap(), &brute_valid(&x, &k), 1e-12);

        let x = random(&[4, 4], &mut rng);
        assert_close(&conv_full(&x, &k).unwrap(), &brute_full(&x, &k), 1e-12);
    }

    #[test]
    fn conv_full_single_site() {
        let out = conv_full(&Tensor::filled(&[1, 1], 2.0), &Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert_eq!(out, Tensor::filled(&[2, 2], 2.0));
    }

    #[test]
    fn shape_laws() {
        let x = Tensor::zeros(&[7, 9]);
        let k = Tensor::zeros(&[3, 2]);
        assert_eq!(conv_valid(&x, &k).unwrap().shape(), &[5, 8]);
        assert_eq!(conv_full(&x, &k).unwrap().shape(), &[9, 10]);
    }

    #[test]
    fn flip180_cases() {
        let k = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flip180(&k).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        let sym = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(flip180(&sym).unwrap(), sym);
        let mut rng = SeededRng::new(3, 0);
        let r = random(&[3, 4], &mut rng);
        assert_eq!(flip180(&flip180(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn adjointness_of_valid_and_full() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed, 0);
            let w = random(&[3, 2], &mut rng);
            let a = random(&[6, 5], &mut rng);
            let b = random(&[4, 4], &mut rng);
            let lhs = conv_valid(&a, &flip180(&w).unwrap()).unwrap().dot(&b);
            let rhs = a.dot(&conv_full(&b, &w).unwrap());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let n = l2_normalize(&[3.0, 4.0]);
        assert!((n.values[0] - 0.6).abs() < 1e-15 && (n.values[1] - 0.8).abs() < 1e-15);
        assert!(!n.degenerate);
        let unit = [0.6, 0.8];
        let again = l2_normalize(&unit);
        assert!((again.values[0] - 0.6).abs() < 1e-15);
        let z = l2_normalize(&[0.0, 0.0]);
        assert_eq!(z.values, vec![0.0, 0.0]);
        assert!(z.degenerate);
    }

    #[test]
    fn relu_cases() {
        let t = Tensor::vector(vec![-1.0, 2.0]);
        assert_eq!(relu(&t).data(), &[0.0, 2.0]);
        assert_eq!(relu(&Tensor::filled(&[3], -2.0)), Tensor::zeros(&[3]));
        let pos = Tensor::vector(vec![0.0, 1.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(11, 0);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let out = l2_normalize(&x);
        let analytic = l2_normalize_backward(&out, &g);
        let h = 1e-6;
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = dot(&l2_normalize(&xp).values, &g);
            let fm = dot(&l2_normalize(&xm).values, &g);
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_has_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
                prop_assume!(norm(&v) > 1e-9);
                let n = l2_normalize(&v);
                prop_assert!((norm(&n.values) - 1.0).abs() < 1e-12);
            }
        }
    }
}
