use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{correlate_full_acc, Tensor};

/// A fixed Gabor bank: every wavelength at every orientation
/// `theta = i * pi / orientations`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborSpec {
    pub wavelengths: Vec<f64>,
    pub orientations: usize,
    /// sigma = sigma_ratio * wavelength
    pub sigma_ratio: f64,
    pub gamma: f64,
    pub psi: f64,
    /// Odd kernel side length.
    pub size: usize,
}

impl Default for GaborSpec {
    fn default() -> Self {
        GaborSpec {
            wavelengths: vec![4.0, 8.0],
            orientations: 4,
            sigma_ratio: 0.56,
            gamma: 0.5,
            psi: 0.0,
            size: 11,
        }
    }
}

impl GaborSpec {
    pub fn len(&self) -> usize {
        self.wavelengths.len() * self.orientations
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 || self.size == 0 {
            return Err(Error::param("gabor kernel size must be odd"));
        }
        if self.orientations == 0 || self.wavelengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::param("gabor bank needs positive wavelengths and orientations"));
        }
        Ok(())
    }

    pub fn kernels(&self) -> Vec<Tensor> {
        self.wavelengths
            .iter()
            .flat_map(|&lambda| {
                (0..self.orientations).map(move |o| {
                    let theta = o as f64 * PI / self.orientations as f64;
                    gabor_kernel(self.size, lambda, theta, self.sigma_ratio * lambda, self.gamma, self.psi)
                })
            })
            .collect()
    }
}

/// Real Gabor kernel centered in a `size x size` grid.
pub fn gabor_kernel(size: usize, lambda: f64, theta: f64, sigma: f64, gamma: f64, psi: f64) -> Tensor {
    let half = (size / 2) as f64;
    let (st, ct) = theta.sin_cos();
    Tensor::from_fn(&[size, size], |idx| {
        let y = (idx / size) as f64 - half;
        let x = (idx % size) as f64 - half;
        let xr = x * ct + y * st;
        let yr = -x * st + y * ct;
        (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp()
            * (2.0 * PI * xr / lambda + psi).cos()
    })
}

/// Filter `image` with every kernel of the bank; `[G x H x W]`, same size
/// as the input (full correlation cropped around the kernel center).
pub fn gabor_bank(image: &Tensor, spec: &GaborSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = image.dims2()?;
    let k = spec.size;
    let half = k / 2;
    let (fh, fw) = (h + k - 1, w + k - 1);
    let kernels = spec.kernels();
    let mut out = Tensor::zeros(&[kernels.len(), h, w]);
    let mut full = vec![0.0; fh * fw];
    for (g, kernel) in kernels.iter().enumerate() {
        full.iter_mut().for_each(|v| *v = 0.0);
        correlate_full_acc(image.data(), (h, w), kernel.data(), (k, k), &mut full);
        let dst = out.slab_mut(g);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&full[(y + half) * fw + half..(y + half) * fw + half + w]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn default_bank_has_eight_kernels() {
        let spec = GaborSpec::default();
        assert_eq!(spec.kernels().len(), 8);
        assert!(spec.kernels().iter().all(|k| k.shape() == [11, 11]));
    }

    #[test]
    fn zero_image_gives_zero_response() {
        let out = gabor_bank(&Tensor::zeros(&[15, 15]), &GaborSpec::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let spec = GaborSpec::default();
        let mut img = Tensor::zeros(&[21, 21]);
        img.set(&[10, 10], 1.0);
        let out = gabor_bank(&img, &spec).unwrap();
        for (g, k) in spec.kernels().iter().enumerate() {
            for r in 0..11 {
                for s in 0..11 {
                    let got = out.get(&[g, 5 + r, 5 + s]);
                    assert!((got - k.get(&[r, s])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_filtering() {
        let spec = GaborSpec {
            wavelengths: vec![4.0],
            orientations: 2,
            size: 5,
            ..GaborSpec::default()
        };
        let mut rng = SeededRng::new(21, 0);
        let img = Tensor::from_fn(&[9, 8], |_| rng.uniform());
        let out = gabor_bank(&img, &spec).unwrap();
        for (g, k) in spec.kernels().iter().enumerate() {
            for y in 0..9isize {
                for x in 0..8isize {
                    let mut acc = 0.0;
                    for r in -2..=2isize {
                        for s in -2..=2isize {
                            let (yy, xx) = (y + r, x + s);
                            if (0..9).contains(&yy) && (0..8).contains(&xx) {
                                acc += k.get(&[(r + 2) as usize, (s + 2) as usize])
                                    * img.get(&[yy as usize, xx as usize]);
                            }
                        }
                    }
                    assert!((out.get(&[g, y as usize, x as usize]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
