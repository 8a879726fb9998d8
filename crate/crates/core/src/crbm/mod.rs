//! Convolutional RBMs with probabilistic max-pooling, greedy CD pretraining
//! of a stacked CDBN, block Gibbs sampling over all hidden layers, and the
//! deterministic (mean-field) embedding used for supervised fine-tuning.
//!
//! Filters act on the visible layer by valid correlation,
//! `I(h[k]) = b[k] + sum_c corr(v[c], W[k, c])`, which is the energy
//! derivative of the standard max-pooling CRBM energy. The top-down pass is
//! the exact adjoint, a full correlation with the flipped filter.
//!
//! When a detection map's side is not a multiple of the pool size, the
//! trailing rows and columns are dropped before pooling; those units are
//! treated as permanently off.

mod block;
mod cd;
mod embed;
mod gibbs;

pub use block::{
    block_probs, bottom_up, crop_for_pooling, energy, infer, pad_detection, sample_block,
    visible_conditional, BlockActivation,
};
pub use cd::{
    apply_gradient, cd_gradient, cd_gradient_with_reconstruction, cd_update, pretrain_stack, CdGradient, CdHyper,
    CdStats, EpochReport, LayerVelocity,
};
pub use embed::{extract_features, FeatureMode, LayerGrad, StackTrace};
pub use gibbs::{gibbs_conditional, gibbs_sample_all, gibbs_sweep, GibbsSample};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CrbmLayer {
    /// `[K x C_in x N_W x N_W]`
    pub filters: Tensor,
    pub hidden_bias: Vec<f64>,
    pub visible_bias: f64,
    pub pool: usize,
}

impl CrbmLayer {
    pub fn zeros(filters: usize, in_channels: usize, size: usize, pool: usize) -> Result<Self> {
        if filters == 0 || in_channels == 0 || size == 0 || pool == 0 {
            return Err(Error::param("CRBM layer needs K, C_in, N_W and C all >= 1"));
        }
        Ok(CrbmLayer {
            filters: Tensor::zeros(&[filters, in_channels, size, size]),
            hidden_bias: vec![0.0; filters],
            visible_bias: 0.0,
            pool,
        })
    }

    /// Filters drawn from `N(0, variance)`, zero biases.
    pub fn random(
        filters: usize,
        in_channels: usize,
        size: usize,
        pool: usize,
        variance: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut layer = Self::zeros(filters, in_channels, size, pool)?;
        let sd = variance.sqrt();
        layer
            .filters
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = sd * rng.normal());
        Ok(layer)
    }

    pub fn filter_count(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn filter_size(&self) -> usize {
        self.filters.shape()[2]
    }

    /// The `N_W x N_W` kernel connecting filter `k` to input channel `c`.
    pub fn kernel(&self, k: usize, c: usize) -> &[f64] {
        let n = self.filter_size() * self.filter_size();
        let o = (k * self.in_channels() + c) * n;
        &self.filters.data()[o..o + n]
    }

    pub fn geometry(&self, visible_side: usize) -> Result<LayerGeometry> {
        let nw = self.filter_size();
        if visible_side < nw {
            return Err(Error::dim(format!(
                "filter {nw}x{nw} larger than visible side {visible_side}"
            )));
        }
        let detection = visible_side - nw + 1;
        let pooled = detection / self.pool;
        if pooled == 0 {
            return Err(Error::dim(format!(
                "detection side {detection} smaller than pool size {}",
                self.pool
            )));
        }
        Ok(LayerGeometry {
            visible: visible_side,
            detection,
            retained: pooled * self.pool,
            pooled,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.filters.is_finite()
            && self.hidden_bias.iter().all(|b| b.is_finite())
            && self.visible_bias.is_finite()
    }
}

/// Side lengths through one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub visible: usize,
    pub detection: usize,
    /// Detection side after cropping to a multiple of the pool size.
    pub retained: usize,
    pub pooled: usize,
}

/// Greedily stacked CRBMs. Layer `l + 1` consumes the pooling units of layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct CdbnStack {
    pub layers: Vec<CrbmLayer>,
    pub input_channels: usize,
    pub input_side: usize,
    /// Set once pretraining has finished (or parameters were loaded).
    pub pretrained: bool,
}

/// Per-layer shape of a stack: `(filters, filter size, pool size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackSpec {
    pub layers: Vec<(usize, usize, usize)>,
}

impl CdbnStack {
    pub fn new(layers: Vec<CrbmLayer>, input_channels: usize, input_side: usize) -> Result<Self> {
        let stack = CdbnStack {
            layers,
            input_channels,
            input_side,
            pretrained: false,
        };
        stack.geometry()?;
        Ok(stack)
    }

    /// Random initialization with filter variance `variance`.
    pub fn random(
        spec: &StackSpec,
        input_channels: usize,
        input_side: usize,
        variance: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::param("a CDBN needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut channels = input_channels;
        for &(k, size, pool) in &spec.layers {
            layers.push(CrbmLayer::random(k, channels, size, pool, variance, rng)?);
            channels = k;
        }
        Self::new(layers, input_channels, input_side)
    }

    /// Validates channel and spatial chaining and returns every layer's geometry.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let mut side = self.input_side;
        let mut channels = self.input_channels;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels() != channels {
                return Err(Error::dim(format!(
                    "layer {i} expects {} input channels, previous layer gives {channels}",
                    layer.in_channels()
                )));
            }
            let g = layer.geometry(side)?;
            side = g.pooled;
            channels = layer.filter_count();
            out.push(g);
        }
        Ok(out)
    }

    /// Length of the feature vector in `mode`.
    pub fn feature_dim(&self, mode: FeatureMode) -> Result<usize> {
        let geo = self.geometry()?;
        let sizes = self
            .layers
            .iter()
            .zip(&geo)
            .map(|(l, g)| l.filter_count() * g.pooled * g.pooled);
        Ok(match mode {
            FeatureMode::TopLayer => sizes.last().unwrap_or(0),
            FeatureMode::ConcatAll => sizes.sum(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(CrbmLayer::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_geometry_shapes() {
        let spec = StackSpec {
            layers: vec![(40, 12, 2), (100, 10, 2), (40, 6, 2)],
        };
        let mut rng = SeededRng::new(0, 0);
        let stack = CdbnStack::random(&spec, 1, 150, 0.01, &mut rng).unwrap();
        let geo = stack.geometry().unwrap();
        let sides: Vec<_> = geo.iter().map(|g| (g.detection, g.retained, g.pooled)).collect();
        assert_eq!(sides, vec![(139, 138, 69), (60, 60, 30), (25, 24, 12)]);
        assert_eq!(stack.feature_dim(FeatureMode::TopLayer).unwrap(), 5760);
        assert_eq!(
            stack.feature_dim(FeatureMode::ConcatAll).unwrap(),
            40 * 69 * 69 + 100 * 30 * 30 + 5760
        );
    }

    #[test]
    fn chaining_is_validated() {
        let a = CrbmLayer::zeros(4, 1, 3, 2).unwrap();
        let b = CrbmLayer::zeros(2, 5, 2, 1).unwrap();
        assert!(CdbnStack::new(vec![a.clone(), b], 1, 9).is_err());
        let big = CrbmLayer::zeros(2, 4, 6, 1).unwrap();
        assert!(CdbnStack::new(vec![a, big], 1, 9).is_err());
        assert!(CrbmLayer::zeros(0, 1, 3, 2).is_err());
    }

    #[test]
    fn initialization_variance() {
        let mut rng = SeededRng::new(17, 0);
        let layer = CrbmLayer::random(40, 1, 12, 2, 0.01, &mut rng).unwrap();
        let w = layer.filters.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() < 0.002, "{var}");
    }
}
