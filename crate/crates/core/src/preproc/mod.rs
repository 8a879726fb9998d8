//! Image preprocessing: raw grayscale image to the multi-channel visible
//! input of the first CRBM (whitened intensity, one-hot uniform LBP codes,
//! Gabor responses), and PCA for reducing extracted features.

mod gabor;
mod lbp;
mod pca;

pub use gabor::{gabor_bank, gabor_kernel, GaborSpec};
pub use lbp::{lbp_code, lbp_map, uniform_bin, LBP_BINS};
pub use pca::{pca_fit, PcaModel};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Corner-aligned bilinear resize of a 2-D image to `rows x cols`.
pub fn resize_bilinear(image: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    if h < 2 || w < 2 || rows == 0 || cols == 0 {
        return Err(Error::dim(format!("cannot resize {h}x{w} to {rows}x{cols}")));
    }
    if (h, w) == (rows, cols) {
        return Ok(image.clone());
    }
    let src = image.data();
    let scale = |n_out: usize, n_in: usize, i: usize| -> (usize, usize, f64) {
        if n_out == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 2);
        (x0, x0 + 1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (y0, y1, fy) = scale(rows, h, i);
        for j in 0..cols {
            let (x0, x1, fx) = scale(cols, w, j);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// A whitened channel; `degenerate` marks constant input (output all zero).
#[derive(Clone, Debug)]
pub struct Whitened {
    pub channel: Tensor,
    pub degenerate: bool,
}

/// Standardize to zero mean and unit (population) variance.
pub fn whiten(channel: &Tensor) -> Whitened {
    let n = channel.len() as f64;
    let mean = channel.data().iter().sum::<f64>() / n;
    let var = channel.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let first = channel.data()[0];
    if channel.data().iter().all(|&x| x == first) || var == 0.0 {
        return Whitened {
            channel: Tensor::zeros(channel.shape()),
            degenerate: true,
        };
    }
    let sd = var.sqrt();
    Whitened {
        channel: channel.map(|x| (x - mean) / sd),
        degenerate: false,
    }
}

/// Which hand-crafted representations feed the visible layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    Intensity,
    Lbp,
    Gabor,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::Intensity => "intensity",
            Representation::Lbp => "lbp",
            Representation::Gabor => "gabor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intensity" => Some(Representation::Intensity),
            "lbp" => Some(Representation::Lbp),
            "gabor" => Some(Representation::Gabor),
            _ => None,
        }
    }
}

/// Settings for turning a grayscale image into an [`InputStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct InputSpec {
    pub size: usize,
    pub representations: Vec<Representation>,
    pub gabor: GaborSpec,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            size: 150,
            representations: vec![
                Representation::Intensity,
                Representation::Lbp,
                Representation::Gabor,
            ],
            gabor: GaborSpec::default(),
        }
    }
}

impl InputSpec {
    pub fn channels_for(&self, rep: Representation) -> usize {
        match rep {
            Representation::Intensity => 1,
            Representation::Lbp => LBP_BINS,
            Representation::Gabor => self.gabor.len(),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.representations.iter().map(|&r| self.channels_for(r)).sum()
    }
}

/// Visible-layer input: `channels` is `[C x S x S]`, with `roles` naming the
/// contiguous channel range of each representation.
#[derive(Clone, Debug)]
pub struct InputStack {
    pub channels: Tensor,
    pub roles: Vec<(Representation, std::ops::Range<usize>)>,
}

impl InputStack {
    /// Channels of a single representation, as a standalone `[c x S x S]` tensor.
    pub fn select(&self, rep: Representation) -> Option<Tensor> {
        let (_, range) = self.roles.iter().find(|(r, _)| *r == rep)?;
        let (_, h, w) = self.channels.dims3().ok()?;
        let plane = h * w;
        let data = self.channels.data()[range.start * plane..range.end * plane].to_vec();
        Tensor::new(vec![range.len(), h, w], data).ok()
    }
}

/// Resize, whiten and expand a grayscale image into the visible-layer stack.
pub fn build_input_stack(image: &Tensor, spec: &InputSpec) -> Result<InputStack> {
    let resized = resize_bilinear(image, spec.size, spec.size)?;
    let plane = spec.size * spec.size;
    let mut data = Vec::with_capacity(spec.channel_count() * plane);
    let mut roles = Vec::new();
    for &rep in &spec.representations {
        let start = data.len() / plane;
        match rep {
            Representation::Intensity => data.extend_from_slice(whiten(&resized).channel.data()),
            Representation::Lbp => data.extend_from_slice(lbp_map(&resized)?.data()),
            Representation::Gabor => {
                let responses = gabor_bank(&resized, &spec.gabor)?;
                for g in 0..responses.shape()[0] {
                    data.extend_from_slice(whiten(&responses.slab_tensor(g)).channel.data());
                }
            }
        }
        roles.push((rep, start..data.len() / plane));
    }
    let c = data.len() / plane;
    Ok(InputStack {
        channels: Tensor::new(vec![c, spec.size, spec.size], data)?,
        roles,
    })
}
