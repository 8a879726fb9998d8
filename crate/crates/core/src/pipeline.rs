//! Image to unit-length embedding: input channels, one CDBN per branch,
//! optional per-branch PCA, concatenation and a final l2 normalization.

use crate::crbm::{pretrain_stack, CdHyper, CdbnStack, EpochReport, FeatureMode, LayerGrad, StackSpec, StackTrace};
use crate::error::{Error, Result};
use crate::preproc::{build_input_stack, pca_fit, InputSpec, InputStack, PcaModel, Representation};
use crate::rng::SeededRng;
use crate::tensor::{l2_normalize, l2_normalize_backward, Normalized, Tensor};

/// How representations map onto stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StackLayout {
    /// One stack over all input channels.
    #[default]
    Joint,
    /// One stack per representation, features concatenated.
    PerRepresentation,
}

impl StackLayout {
    pub fn name(self) -> &'static str {
        match self {
            StackLayout::Joint => "joint",
            StackLayout::PerRepresentation => "per_representation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(StackLayout::Joint),
            "per_representation" => Some(StackLayout::PerRepresentation),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub representations: Vec<Representation>,
    pub stack: CdbnStack,
    pub pca: Option<PcaModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub input: InputSpec,
    pub mode: FeatureMode,
    pub branches: Vec<Branch>,
}

/// Per-branch traces below the first trainable layer.
#[derive(Clone, Debug)]
pub struct Cached {
    pub traces: Vec<StackTrace>,
}

/// Everything [`Embedder::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub traces: Vec<StackTrace>,
    pub unit: Vec<Normalized>,
    pub out: Normalized,
}

impl Embedding {
    pub fn features(&self) -> &[f64] {
        &self.out.values
    }
}

fn branch_input(stack: &InputStack, reps: &[Representation]) -> Result<Tensor> {
    let parts: Vec<Tensor> = reps
        .iter()
        .map(|&r| stack.select(r).ok_or_else(|| Error::config(format!("representation {} not in input", r.name()))))
        .collect::<Result<_>>()?;
    let (_, h, w) = parts[0].dims3()?;
    let c: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![c, h, w], data)
}

impl Embedder {
    /// Randomly initialized, unpretrained stacks.
    pub fn random(
        input: InputSpec,
        layout: StackLayout,
        spec: &StackSpec,
        mode: FeatureMode,
        variance: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if input.representations.is_empty() {
            return Err(Error::config("at least one input representation is required"));
        }
        let groups: Vec<Vec<Representation>> = match layout {
            StackLayout::Joint => vec![input.representations.clone()],
            StackLayout::PerRepresentation => input.representations.iter().map(|&r| vec![r]).collect(),
        };
        let branches = groups
            .into_iter()
            .map(|reps| {
                let channels = reps.iter().map(|&r| input.channels_for(r)).sum();
                Ok(Branch {
                    stack: CdbnStack::random(spec, channels, input.size, variance, rng)?,
                    representations: reps,
                    pca: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Embedder { input, mode, branches })
    }

    pub fn depth(&self) -> usize {
        self.branches[0].stack.layers.len()
    }

    pub fn is_pretrained(&self) -> bool {
        self.branches.iter().all(|b| b.stack.pretrained)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.branches
            .iter()
            .map(|b| match &b.pca {
                Some(p) => Ok(p.components),
                None => b.stack.feature_dim(self.mode),
            })
            .sum()
    }

    /// Visible-layer tensor of each branch.
    pub fn branch_inputs(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let stack = build_input_stack(image, &self.input)?;
        self.branches.iter().map(|b| branch_input(&stack, &b.representations)).collect()
    }

    /// Forward through layers `..from` of every branch, for reuse while only
    /// layers `from..` change.
    pub fn cache(&self, image: &Tensor, from: usize) -> Result<Cached> {
        let inputs = self.branch_inputs(image)?;
        let traces = self
            .branches
            .iter()
            .zip(inputs)
            .map(|(b, input)| {
                let seed = StackTrace {
                    inputs: vec![input],
                    activations: Vec::new(),
                };
                if from == 0 {
                    return Ok(seed);
                }
                Ok(b.stack.trace_from(&seed, 0)?.prefix(from))
            })
            .collect::<Result<_>>()?;
        Ok(Cached { traces })
    }

    pub fn forward(&self, cached: &Cached, from: usize) -> Result<Embedding> {
        let mut traces = Vec::with_capacity(self.branches.len());
        let mut unit = Vec::with_capacity(self.branches.len());
        let mut concat = Vec::new();
        for (b, c) in self.branches.iter().zip(&cached.traces) {
            let trace = b.stack.trace_from(c, from)?;
            let n = l2_normalize(&trace.raw_features(self.mode));
            match &b.pca {
                Some(p) => concat.extend(p.project(&n.values)?),
                None => concat.extend_from_slice(&n.values),
            }
            traces.push(trace);
            unit.push(n);
        }
        Ok(Embedding {
            traces,
            unit,
            out: l2_normalize(&concat),
        })
    }

    /// Deterministic embedding of one image.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        if !self.is_pretrained() {
            return Err(Error::contract("feature extraction needs pretrained stacks"));
        }
        self.embed_unchecked(image)
    }

    /// As [`Embedder::embed`] without the pretraining check (untrained baselines).
    pub fn embed_unchecked(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(&self.cache(image, 0)?, 0)?.out.values)
    }

    /// Gradients of layers `from..` of every branch given `d loss / d f`.
    pub fn backward(&self, emb: &Embedding, grad: &[f64], from: usize) -> Result<Vec<Vec<LayerGrad>>> {
        let g_concat = l2_normalize_backward(&emb.out, grad);
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.branches.len());
        for ((b, trace), n) in self.branches.iter().zip(&emb.traces).zip(&emb.unit) {
            let width = match &b.pca {
                Some(p) => p.components,
                None => n.values.len(),
            };
            let g = &g_concat[offset..offset + width];
            offset += width;
            let g_unit = match &b.pca {
                Some(p) => p.project_backward(g),
                None => g.to_vec(),
            };
            let g_raw = l2_normalize_backward(n, &g_unit);
            out.push(b.stack.backward(trace, self.mode, &g_raw, from)?);
        }
        Ok(out)
    }

    /// Greedy CD pretraining of every branch on `images`.
    pub fn pretrain(
        &mut self,
        images: &[Tensor],
        epochs: usize,
        hyper: &CdHyper,
        rng: &mut SeededRng,
        observer: &mut dyn FnMut(usize, &EpochReport),
    ) -> Result<()> {
        let inputs: Vec<Vec<Tensor>> = images.iter().map(|im| self.branch_inputs(im)).collect::<Result<_>>()?;
        for (bi, branch) in self.branches.iter_mut().enumerate() {
            let data: Vec<Tensor> = inputs.iter().map(|v| v[bi].clone()).collect();
            pretrain_stack(&mut branch.stack, &data, epochs, hyper, rng, &mut |r, _| observer(bi, r))?;
        }
        Ok(())
    }

    /// Fit each branch's PCA on the unit features of `images`.
    pub fn fit_pca(&mut self, images: &[Tensor], components: usize) -> Result<()> {
        for b in &mut self.branches {
            b.pca = None;
        }
        let caches: Vec<Cached> = images.iter().map(|im| self.cache(im, 0)).collect::<Result<_>>()?;
        for bi in 0..self.branches.len() {
            let feats: Vec<Vec<f64>> = caches
                .iter()
                .map(|c| {
                    let t = self.branches[bi].stack.trace_from(&c.traces[bi], 0)?;
                    Ok(l2_normalize(&t.raw_features(self.mode)).values)
                })
                .collect::<Result<_>>()?;
            let model = pca_fit(&feats, components)?;
            if model.components < components {
                log::warn!("branch {bi}: PCA kept {} of {components} components", model.components);
            }
            self.branches[bi].pca = Some(model);
        }
        Ok(())
    }
}

/// Where each trainable tensor sits in a flat parameter vector: the head
/// first, then for every branch the filters and hidden biases of layers
/// `from..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub head_len: usize,
    pub from: usize,
    /// `(branch, layer, filter count, bias count)`.
    pub segments: Vec<(usize, usize, usize, usize)>,
}

impl ParamLayout {
    pub fn new(head_len: usize, emb: &Embedder, from: usize) -> Result<Self> {
        let depth = emb.depth();
        if from >= depth {
            return Err(Error::config(format!("first trainable layer {from} exceeds depth {depth}")));
        }
        let mut segments = Vec::new();
        for (bi, b) in emb.branches.iter().enumerate() {
            for l in from..depth {
                let layer = &b.stack.layers[l];
                segments.push((bi, l, layer.filters.len(), layer.hidden_bias.len()));
            }
        }
        Ok(ParamLayout {
            head_len,
            from,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.head_len + self.segments.iter().map(|s| s.2 + s.3).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, head: &[f64], emb: &Embedder) -> Vec<f64> {
        let mut w = head.to_vec();
        for &(b, l, _, _) in &self.segments {
            let layer = &emb.branches[b].stack.layers[l];
            w.extend_from_slice(layer.filters.data());
            w.extend_from_slice(&layer.hidden_bias);
        }
        w
    }

    /// Write the stack part of `w` into `emb`; returns the head slice.
    pub fn apply<'w>(&self, w: &'w [f64], emb: &mut Embedder) -> &'w [f64] {
        let mut o = self.head_len;
        for &(b, l, nf, nb) in &self.segments {
            let layer = &mut emb.branches[b].stack.layers[l];
            layer.filters.data_mut().copy_from_slice(&w[o..o + nf]);
            layer.hidden_bias.copy_from_slice(&w[o + nf..o + nf + nb]);
            o += nf + nb;
        }
        &w[..self.head_len]
    }

    /// Add per-branch layer gradients into the stack part of `out`.
    pub fn accumulate(&self, grads: &[Vec<LayerGrad>], out: &mut [f64]) {
        let mut o = self.head_len;
        for &(b, l, nf, nb) in &self.segments {
            let g = &grads[b][l - self.from];
            for (a, x) in out[o..o + nf].iter_mut().zip(g.filters.data()) {
                *a += x;
            }
            for (a, x) in out[o + nf..o + nf + nb].iter_mut().zip(&g.hidden_bias) {
                *a += x;
            }
            o += nf + nb;
        }
    }
}
