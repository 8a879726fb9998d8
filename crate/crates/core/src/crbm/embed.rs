use super::block::{infer, pad_detection, top_down, BlockActivation};
use super::CdbnStack;
use crate::error::{Error, Result};
use crate::tensor::{correlate_valid_acc, l2_normalize, Tensor};

/// Which pooled layers make up the feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Pooling probabilities of the top layer only.
    #[default]
    TopLayer,
    /// Pooling probabilities of every layer, bottom first.
    ConcatAll,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::TopLayer => "third_layer",
            FeatureMode::ConcatAll => "concat_all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "third_layer" | "top_layer" => Some(FeatureMode::TopLayer),
            "concat_all" => Some(FeatureMode::ConcatAll),
            _ => None,
        }
    }

    fn includes(self, layer: usize, depth: usize) -> bool {
        self == FeatureMode::ConcatAll || layer + 1 == depth
    }
}

/// Mean-field forward pass through a stack. `inputs[l]` is what layer `l`
/// saw, `activations[l]` its posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct StackTrace {
    pub inputs: Vec<Tensor>,
    pub activations: Vec<BlockActivation>,
}

impl StackTrace {
    /// Flattened pooling probabilities, before normalization.
    pub fn raw_features(&self, mode: FeatureMode) -> Vec<f64> {
        let depth = self.activations.len();
        self.activations
            .iter()
            .enumerate()
            .filter(|(l, _)| mode.includes(*l, depth))
            .flat_map(|(_, a)| a.pooling.data().iter().copied())
            .collect()
    }

    /// The part of the trace below layer `start`, which stays valid while
    /// only layers `start..` change.
    pub fn prefix(&self, start: usize) -> StackTrace {
        StackTrace {
            inputs: self.inputs[..=start.min(self.inputs.len() - 1)].to_vec(),
            activations: self.activations[..start.min(self.activations.len())].to_vec(),
        }
    }
}

/// Gradient of one layer's filters and hidden biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub filters: Tensor,
    pub hidden_bias: Vec<f64>,
}

impl CdbnStack {
    pub fn trace(&self, input: &Tensor) -> Result<StackTrace> {
        let seed = StackTrace {
            inputs: vec![input.clone()],
            activations: Vec::new(),
        };
        self.trace_from(&seed, 0)
    }

    /// Recompute layers `start..` on top of a cached prefix (see [`StackTrace::prefix`]).
    pub fn trace_from(&self, cached: &StackTrace, start: usize) -> Result<StackTrace> {
        if cached.inputs.len() <= start || cached.activations.len() < start {
            return Err(Error::dim(format!("cached trace does not reach layer {start}")));
        }
        let mut inputs = cached.inputs[..=start].to_vec();
        let mut activations = cached.activations[..start].to_vec();
        for l in start..self.layers.len() {
            let act = infer(&inputs[l], &self.layers[l])?;
            if l + 1 < self.layers.len() {
                inputs.push(act.pooling.clone());
            }
            activations.push(act);
        }
        Ok(StackTrace { inputs, activations })
    }

    /// Back-propagate a gradient on the raw (unnormalized) features to the
    /// filters and hidden biases of layers `from..`. Returned in layer order.
    pub fn backward(
        &self,
        trace: &StackTrace,
        mode: FeatureMode,
        grad: &[f64],
        from: usize,
    ) -> Result<Vec<LayerGrad>> {
        let depth = self.layers.len();
        if from >= depth || trace.activations.len() != depth {
            return Err(Error::dim("trace and stack depth disagree"));
        }
        let sizes: Vec<usize> = trace.activations.iter().map(|a| a.pooling.len()).collect();
        let total: usize = (0..depth).filter(|&l| mode.includes(l, depth)).map(|l| sizes[l]).sum();
        if grad.len() != total {
            return Err(Error::dim(format!("feature gradient has {} entries, expected {total}", grad.len())));
        }
        let geo = self.geometry()?;
        let mut offsets = vec![0usize; depth];
        let mut acc = 0;
        for l in 0..depth {
            offsets[l] = acc;
            if mode.includes(l, depth) {
                acc += sizes[l];
            }
        }

        let mut out = Vec::with_capacity(depth - from);
        let mut from_above: Option<Tensor> = None;
        for l in (from..depth).rev() {
            let layer = &self.layers[l];
            let act = &trace.activations[l];
            let mut g_pool = from_above.take().unwrap_or_else(|| Tensor::zeros(act.pooling.shape()));
            if mode.includes(l, depth) {
                for (g, x) in g_pool.data_mut().iter_mut().zip(&grad[offsets[l]..offsets[l] + sizes[l]]) {
                    *g += x;
                }
            }
            let (k_count, n, _) = act.detection.dims3()?;
            let pool = layer.pool;
            let np = n / pool;
            // dp / dI_i = P(h_i = 1) * P(block off)
            let mut g_signal = Tensor::zeros(&[k_count, n, n]);
            for k in 0..k_count {
                let det = act.detection.slab(k);
                let off = act.off.slab(k);
                let gp = g_pool.slab(k);
                let dst = g_signal.slab_mut(k);
                for y in 0..n {
                    for x in 0..n {
                        let a = (y / pool) * np + x / pool;
                        dst[y * n + x] = gp[a] * det[y * n + x] * off[a];
                    }
                }
            }
            let g_full = pad_detection(&g_signal, geo[l].detection)?;
            let input = &trace.inputs[l];
            let (cin, nv, _) = input.dims3()?;
            let nh = geo[l].detection;
            let nw = layer.filter_size();
            let mut filters = Tensor::zeros(layer.filters.shape());
            for k in 0..k_count {
                for c in 0..cin {
                    let o = (k * cin + c) * nw * nw;
                    correlate_valid_acc(
                        input.slab(c),
                        (nv, nv),
                        g_full.slab(k),
                        (nh, nh),
                        &mut filters.data_mut()[o..o + nw * nw],
                    );
                }
            }
            let hidden_bias = (0..k_count).map(|k| g_signal.slab(k).iter().sum()).collect();
            out.push(LayerGrad { filters, hidden_bias });
            if l > from {
                from_above = Some(top_down(&g_full, layer)?);
            }
        }
        out.reverse();
        Ok(out)
    }
}

/// Deterministic embedding: mean-field pass, flatten, l2-normalize.
pub fn extract_features(stack: &CdbnStack, input: &Tensor, mode: FeatureMode) -> Result<Vec<f64>> {
    if !stack.pretrained {
        return Err(Error::contract("feature extraction needs a pretrained stack"));
    }
    Ok(l2_normalize(&stack.trace(input)?.raw_features(mode)).values)
}
