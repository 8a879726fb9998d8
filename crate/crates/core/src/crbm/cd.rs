use super::block::{bottom_up, crop_for_pooling, infer, pad_detection, sample_block, visible_conditional};
use super::{CdbnStack, CrbmLayer};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{correlate_valid_acc, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplies the weights inside the learning-rate scaled step.
    pub weight_decay: f64,
    pub sparsity_target: f64,
    pub sparsity_weight: f64,
    pub batch_size: usize,
}

impl Default for CdHyper {
    fn default() -> Self {
        CdHyper {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.002,
            sparsity_target: 0.01,
            sparsity_weight: 1.0,
            batch_size: 10,
        }
    }
}

impl CdHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.sparsity_target)
            && self.sparsity_weight >= 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid CD hyperparameters {self:?}")))
        }
    }
}

/// Averaged CD-1 statistics for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CdGradient {
    /// `<v h>_data - <v h>_recon`, per detection site and example.
    pub filters: Tensor,
    pub hidden_bias: Vec<f64>,
    pub visible_bias: f64,
    /// Mean positive-phase detection probability per filter.
    pub mean_activation: Vec<f64>,
    /// Mean data patch under a detection site, `[C_in x N_W x N_W]`;
    /// the weight part of the sparsity gradient.
    pub mean_patch: Tensor,
    pub mse: f64,
}

/// Momentum buffers of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerVelocity {
    pub filters: Tensor,
    pub hidden_bias: Vec<f64>,
    pub visible_bias: f64,
}

impl LayerVelocity {
    pub fn zeros(layer: &CrbmLayer) -> Self {
        LayerVelocity {
            filters: Tensor::zeros(layer.filters.shape()),
            hidden_bias: vec![0.0; layer.filter_count()],
            visible_bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdStats {
    pub mse: f64,
    pub mean_activation: Vec<f64>,
}

/// `acc[k, c] += scale * corr_valid(v[c], h[k])` for full-size `h`.
fn accumulate_vh(acc: &mut Tensor, v: &Tensor, h: &Tensor, scale: f64) -> Result<()> {
    let (kc, cin, nw, _) = (acc.shape()[0], acc.shape()[1], acc.shape()[2], acc.shape()[3]);
    let (_, nv, _) = v.dims3()?;
    let nh = nv - nw + 1;
    let mut tmp = vec![0.0; nw * nw];
    for k in 0..kc {
        for c in 0..cin {
            tmp.iter_mut().for_each(|x| *x = 0.0);
            correlate_valid_acc(v.slab(c), (nv, nv), h.slab(k), (nh, nh), &mut tmp);
            let o = (k * cin + c) * nw * nw;
            for (a, t) in acc.data_mut()[o..o + nw * nw].iter_mut().zip(&tmp) {
                *a += scale * t;
            }
        }
    }
    Ok(())
}

/// CD statistics with the negative phase driven by the given reconstructions.
pub fn cd_gradient_with_reconstruction(
    layer: &CrbmLayer,
    batch: &[Tensor],
    recon: &[Tensor],
) -> Result<CdGradient> {
    if batch.is_empty() {
        return Err(Error::data("CD update needs a non-empty batch"));
    }
    if batch.len() != recon.len() {
        return Err(Error::dim("one reconstruction per example required"));
    }
    let (_, nv, _) = batch[0].dims3()?;
    let g = layer.geometry(nv)?;
    let kc = layer.filter_count();
    let cin = layer.in_channels();
    let nw = layer.filter_size();
    let sites = (g.retained * g.retained) as f64;
    let scale = 1.0 / (batch.len() as f64 * sites);
    let mut filters = Tensor::zeros(layer.filters.shape());
    let mut hidden_bias = vec![0.0; kc];
    let mut visible_bias = 0.0;
    let mut mean_activation = vec![0.0; kc];
    let mut mean_patch = Tensor::zeros(&[cin, nw, nw]);
    let mut mse = 0.0;
    let mut ones = Tensor::zeros(&[1, g.detection, g.detection]);
    for y in 0..g.retained {
        for x in 0..g.retained {
            ones.set(&[0, y, x], 1.0);
        }
    }
    for (v, r) in batch.iter().zip(recon) {
        if v.shape() != r.shape() || v.shape() != batch[0].shape() {
            return Err(Error::dim("batch examples must share one shape"));
        }
        let pos = pad_detection(&infer(v, layer)?.detection, g.detection)?;
        let neg = pad_detection(&infer(r, layer)?.detection, g.detection)?;
        accumulate_vh(&mut filters, v, &pos, scale)?;
        accumulate_vh(&mut filters, r, &neg, -scale)?;
        for k in 0..kc {
            let p: f64 = pos.slab(k).iter().sum();
            let q: f64 = neg.slab(k).iter().sum();
            hidden_bias[k] += (p - q) * scale;
            mean_activation[k] += p * scale;
        }
        let n_vis = v.len() as f64;
        let diff: f64 = v.data().iter().zip(r.data()).map(|(a, b)| a - b).sum();
        visible_bias += diff / n_vis / batch.len() as f64;
        mse += v
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n_vis
            / batch.len() as f64;
        let mut patch = Tensor::zeros(&[1, cin, nw, nw]);
        accumulate_vh(&mut patch, v, &ones, scale)?;
        for (a, b) in mean_patch.data_mut().iter_mut().zip(patch.data()) {
            *a += b;
        }
    }
    Ok(CdGradient {
        filters,
        hidden_bias,
        visible_bias,
        mean_activation,
        mean_patch,
        mse,
    })
}

/// CD-1 statistics: sample hiddens from the data posterior, reconstruct with
/// the Gaussian mean, recompute the posterior.
pub fn cd_gradient(layer: &CrbmLayer, batch: &[Tensor], rng: &mut SeededRng) -> Result<CdGradient> {
    if batch.is_empty() {
        return Err(Error::data("CD update needs a non-empty batch"));
    }
    let mut recon = Vec::with_capacity(batch.len());
    for v in batch {
        let signal = bottom_up(v, layer)?;
        let side = signal.shape()[1];
        let act = super::block::block_probs(&crop_for_pooling(&signal, layer.pool)?, layer.pool)?;
        let h = pad_detection(&sample_block(&act, rng)?, side)?;
        recon.push(visible_conditional(&h, layer)?);
    }
    cd_gradient_with_reconstruction(layer, batch, &recon)
}

/// Momentum step: `vel = m * vel + lr * (grad - wd * W + sparsity)`, `W += vel`.
pub fn apply_gradient(
    layer: &mut CrbmLayer,
    velocity: &mut LayerVelocity,
    grad: &CdGradient,
    hyper: &CdHyper,
) {
    let (lr, m, wd) = (hyper.learning_rate, hyper.momentum, hyper.weight_decay);
    let cin = layer.in_channels();
    let nw2 = layer.filter_size() * layer.filter_size();
    for k in 0..layer.filter_count() {
        let push = hyper.sparsity_weight * (hyper.sparsity_target - grad.mean_activation[k]);
        for c in 0..cin {
            let o = (k * cin + c) * nw2;
            for t in 0..nw2 {
                let w = layer.filters.data()[o + t];
                let g = grad.filters.data()[o + t] - wd * w + push * grad.mean_patch.data()[c * nw2 + t];
                let vel = &mut velocity.filters.data_mut()[o + t];
                *vel = m * *vel + lr * g;
                layer.filters.data_mut()[o + t] = w + *vel;
            }
        }
        let vb = &mut velocity.hidden_bias[k];
        *vb = m * *vb + lr * (grad.hidden_bias[k] + push);
        layer.hidden_bias[k] += *vb;
    }
    velocity.visible_bias = m * velocity.visible_bias + lr * grad.visible_bias;
    layer.visible_bias += velocity.visible_bias;
}

/// One CD-1 mini-batch update of `layer`.
pub fn cd_update(
    layer: &mut CrbmLayer,
    velocity: &mut LayerVelocity,
    batch: &[Tensor],
    hyper: &CdHyper,
    rng: &mut SeededRng,
) -> Result<CdStats> {
    hyper.validate()?;
    let grad = cd_gradient(layer, batch, rng)?;
    apply_gradient(layer, velocity, &grad, hyper);
    if !layer.is_finite() {
        return Err(Error::data("CD update produced non-finite parameters"));
    }
    Ok(CdStats {
        mse: grad.mse,
        mean_activation: grad.mean_activation,
    })
}

/// Mean reconstruction MSE of one epoch of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub layer: usize,
    pub epoch: usize,
    pub mse: f64,
}

/// Greedy layer-wise CD pretraining. Each layer trains on the pooling
/// probabilities of the (frozen) layer below; `observer` sees every epoch.
pub fn pretrain_stack(
    stack: &mut CdbnStack,
    dataset: &[Tensor],
    epochs: usize,
    hyper: &CdHyper,
    rng: &mut SeededRng,
    observer: &mut dyn FnMut(&EpochReport, &CdbnStack),
) -> Result<Vec<EpochReport>> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::data("pretraining needs a non-empty dataset"));
    }
    let expect = [stack.input_channels, stack.input_side, stack.input_side];
    if dataset.iter().any(|v| v.shape() != expect) {
        return Err(Error::dim(format!("pretraining data must be {expect:?}")));
    }
    stack.geometry()?;
    let mut reports = Vec::new();
    let mut data: Vec<Tensor> = dataset.to_vec();
    for l in 0..stack.layers.len() {
        let mut velocity = LayerVelocity::zeros(&stack.layers[l]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<Tensor> = chunk.iter().map(|&i| data[i].clone()).collect();
                let stats = cd_update(&mut stack.layers[l], &mut velocity, &batch, hyper, rng)?;
                total += stats.mse;
                batches += 1;
            }
            let report = EpochReport {
                layer: l,
                epoch,
                mse: total / batches as f64,
            };
            log::debug!("pretrain layer {l} epoch {epoch} mse {:.6}", report.mse);
            observer(&report, stack);
            reports.push(report);
        }
        if l + 1 < stack.layers.len() {
            data = data
                .iter()
                .map(|v| infer(v, &stack.layers[l]).map(|a| a.pooling))
                .collect::<Result<_>>()?;
        }
    }
    stack.pretrained = true;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crbm::StackSpec;

    pub(crate) fn stripes(n: usize, side: usize, rng: &mut SeededRng) -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                let vertical = rng.bernoulli(0.5).unwrap();
                let period = 2 + rng.index(3);
                let phase = rng.index(period);
                Tensor::from_fn(&[1, side, side], |i| {
                    let (y, x) = (i / side, i % side);
                    let t = if vertical { x } else { y };
                    let on = (t + phase) % period == 0;
                    (if on { 1.0 } else { -0.5 }) + 0.1 * rng.normal()
                })
            })
            .collect()
    }

    #[test]
    fn identical_phases_give_zero_gradient() {
        let mut rng = SeededRng::new(1, 0);
        let mut layer = CrbmLayer::random(3, 1, 3, 2, 0.01, &mut rng).unwrap();
        let batch = stripes(4, 8, &mut rng);
        let grad = cd_gradient_with_reconstruction(&layer, &batch, &batch).unwrap();
        assert!(grad.filters.data().iter().all(|&g| g == 0.0));
        assert!(grad.hidden_bias.iter().all(|&g| g == 0.0));
        assert_eq!(grad.visible_bias, 0.0);
        assert_eq!(grad.mse, 0.0);

        // with sparsity off the step is momentum plus decay alone
        let hyper = CdHyper {
            sparsity_weight: 0.0,
            ..CdHyper::default()
        };
        let mut vel = LayerVelocity::zeros(&layer);
        vel.filters.data_mut().iter_mut().for_each(|v| *v = 0.05);
        let before = layer.clone();
        apply_gradient(&mut layer, &mut vel, &grad, &hyper);
        for (w1, w0) in layer.filters.data().iter().zip(before.filters.data()) {
            let want = w0 + 0.9 * 0.05 - 0.1 * 0.002 * w0;
            assert!((w1 - want).abs() < 1e-15);
        }
        assert_eq!(layer.hidden_bias, before.hidden_bias);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut rng = SeededRng::new(1, 0);
        let mut layer = CrbmLayer::zeros(1, 1, 2, 1).unwrap();
        let mut vel = LayerVelocity::zeros(&layer);
        let r = cd_update(&mut layer, &mut vel, &[], &CdHyper::default(), &mut rng);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    // positive-phase statistic against a direct sum over sites
    #[test]
    fn positive_statistic_matches_loop() {
        let mut rng = SeededRng::new(3, 0);
        let layer = CrbmLayer::random(2, 2, 3, 2, 0.1, &mut rng).unwrap();
        let v = Tensor::from_fn(&[2, 7, 7], |_| rng.normal());
        let zero = Tensor::zeros(&[2, 7, 7]);
        let grad = cd_gradient_with_reconstruction(&layer, &[v.clone()], &[zero.clone()]).unwrap();
        let neg = infer(&zero, &layer).unwrap().detection;
        let pos = infer(&v, &layer).unwrap().detection;
        for k in 0..2 {
            for c in 0..2 {
                for r in 0..3 {
                    for s in 0..3 {
                        let mut acc = 0.0;
                        for i in 0..4 {
                            for j in 0..4 {
                                acc += pos.get(&[k, i, j]) * v.get(&[c, i + r, j + s]);
                            }
                        }
                        let got = grad.filters.get(&[k, c, r, s]);
                        assert!((got - acc / 16.0).abs() < 1e-12);
                    }
                }
            }
            let pb: f64 = pos.slab(k).iter().sum::<f64>() - neg.slab(k).iter().sum::<f64>();
            assert!((grad.hidden_bias[k] - pb / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_stack_is_repeated_cd_update() {
        let mut rng = SeededRng::new(5, 0);
        let data = stripes(12, 8, &mut rng);
        let spec = StackSpec {
            layers: vec![(4, 3, 2)],
        };
        let init = CdbnStack::random(&spec, 1, 8, 0.01, &mut rng).unwrap();
        let hyper = CdHyper {
            batch_size: 4,
            ..CdHyper::default()
        };

        let mut stack = init.clone();
        let mut r1 = SeededRng::new(9, 0);
        pretrain_stack(&mut stack, &data, 3, &hyper, &mut r1, &mut |_, _| {}).unwrap();

        let mut layer = init.layers[0].clone();
        let mut vel = LayerVelocity::zeros(&layer);
        let mut r2 = SeededRng::new(9, 0);
        let mut order: Vec<usize> = (0..12).collect();
        for _ in 0..3 {
            r2.shuffle(&mut order);
            for chunk in order.chunks(4) {
                let batch: Vec<Tensor> = chunk.iter().map(|&i| data[i].clone()).collect();
                cd_update(&mut layer, &mut vel, &batch, &hyper, &mut r2).unwrap();
            }
        }
        assert_eq!(stack.layers[0], layer);
        assert!(stack.pretrained);
    }

    #[test]
    fn lower_layers_are_frozen() {
        let mut rng = SeededRng::new(6, 0);
        let data = stripes(10, 12, &mut rng);
        let spec = StackSpec {
            layers: vec![(3, 3, 2), (2, 2, 1)],
        };
        let mut stack = CdbnStack::random(&spec, 1, 12, 0.01, &mut rng).unwrap();
        let mut snapshot = None;
        pretrain_stack(&mut stack, &data, 2, &CdHyper::default(), &mut rng, &mut |r, s| {
            if r.layer == 0 && r.epoch == 1 {
                snapshot = Some(s.layers[0].clone());
            }
        })
        .unwrap();
        let snap = snapshot.unwrap();
        assert_eq!(snap.filters.data(), stack.layers[0].filters.data());
        assert_eq!(snap.hidden_bias, stack.layers[0].hidden_bias);
        assert_eq!(snap.visible_bias.to_bits(), stack.layers[0].visible_bias.to_bits());
    }
}
