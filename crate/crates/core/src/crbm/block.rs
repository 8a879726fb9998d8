use super::CrbmLayer;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{correlate_full_acc, correlate_valid_acc, flip180_slice, Tensor};

/// Posterior of the hidden and pooling units of one layer given its input.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockActivation {
    /// `P(h = 1)`, `[K x N x N]` with `N` a multiple of `pool`.
    pub detection: Tensor,
    /// `P(p = 1)`, `[K x N/C x N/C]`.
    pub pooling: Tensor,
    /// `P(every unit of the block off)`, same shape as `pooling`.
    pub off: Tensor,
    pub pool: usize,
}

fn check_input(v: &Tensor, layer: &CrbmLayer) -> Result<(usize, usize)> {
    let (c, h, w) = v.dims3()?;
    if c != layer.in_channels() {
        return Err(Error::dim(format!(
            "layer expects {} input channels, got {c}",
            layer.in_channels()
        )));
    }
    if h != w {
        return Err(Error::dim(format!("visible layer must be square, got {h}x{w}")));
    }
    if h < layer.filter_size() {
        return Err(Error::dim(format!(
            "visible side {h} smaller than filter side {}",
            layer.filter_size()
        )));
    }
    Ok((c, h))
}

/// Bottom-up signal `I[k] = b[k] + sum_c corr_valid(v[c], W[k, c])`,
/// `[K x N_H x N_H]` with `N_H = N_V - N_W + 1`.
pub fn bottom_up(v: &Tensor, layer: &CrbmLayer) -> Result<Tensor> {
    let (channels, nv) = check_input(v, layer)?;
    let nw = layer.filter_size();
    let nh = nv - nw + 1;
    let k_count = layer.filter_count();
    let mut out = Tensor::zeros(&[k_count, nh, nh]);
    for k in 0..k_count {
        let dst = out.slab_mut(k);
        dst.iter_mut().for_each(|x| *x = layer.hidden_bias[k]);
        for c in 0..channels {
            correlate_valid_acc(v.slab(c), (nv, nv), layer.kernel(k, c), (nw, nw), dst);
        }
    }
    Ok(out)
}

/// Drop trailing rows and columns so the side is a multiple of `pool`.
pub fn crop_for_pooling(signal: &Tensor, pool: usize) -> Result<Tensor> {
    let (k, h, w) = signal.dims3()?;
    if h != w || pool == 0 || h < pool {
        return Err(Error::dim(format!("cannot pool a {h}x{w} map by {pool}")));
    }
    let keep = h / pool * pool;
    if keep == h {
        return Ok(signal.clone());
    }
    let mut out = Vec::with_capacity(k * keep * keep);
    for plane in 0..k {
        let src = signal.slab(plane);
        for y in 0..keep {
            out.extend_from_slice(&src[y * w..y * w + keep]);
        }
    }
    Tensor::new(vec![k, keep, keep], out)
}

/// Zero-pad a cropped `[K x n x n]` map back to `[K x side x side]`.
pub fn pad_detection(h: &Tensor, side: usize) -> Result<Tensor> {
    let (k, n, m) = h.dims3()?;
    if n != m || n > side {
        return Err(Error::dim(format!("cannot pad {n}x{m} to {side}x{side}")));
    }
    if n == side {
        return Ok(h.clone());
    }
    let mut out = Tensor::zeros(&[k, side, side]);
    for plane in 0..k {
        let src = h.slab(plane);
        let dst = out.slab_mut(plane);
        for y in 0..n {
            dst[y * side..y * side + n].copy_from_slice(&src[y * n..(y + 1) * n]);
        }
    }
    Ok(out)
}

/// Block softmax over each `C x C` block plus its off state.
pub fn block_probs(signal: &Tensor, pool: usize) -> Result<BlockActivation> {
    let (k_count, n, m) = signal.dims3()?;
    if n != m || pool == 0 || n % pool != 0 {
        return Err(Error::dim(format!(
            "detection map {n}x{m} not divisible into {pool}x{pool} blocks"
        )));
    }
    let np = n / pool;
    let mut detection = Tensor::zeros(&[k_count, n, n]);
    let mut pooling = Tensor::zeros(&[k_count, np, np]);
    let mut off = Tensor::zeros(&[k_count, np, np]);
    let mut ex = vec![0.0; pool * pool];
    for k in 0..k_count {
        let src = signal.slab(k);
        for by in 0..np {
            for bx in 0..np {
                let cell = |t: usize| (by * pool + t / pool) * n + bx * pool + t % pool;
                // the off state contributes exp(0)
                let top = (0..pool * pool).map(|t| src[cell(t)]).fold(0.0f64, f64::max);
                let off_w = (-top).exp();
                let mut z = off_w;
                for (t, e) in ex.iter_mut().enumerate() {
                    *e = (src[cell(t)] - top).exp();
                    z += *e;
                }
                let mut on = 0.0;
                let det = detection.slab_mut(k);
                for (t, e) in ex.iter().enumerate() {
                    let p = e / z;
                    det[cell(t)] = p;
                    on += p;
                }
                pooling.slab_mut(k)[by * np + bx] = on;
                off.slab_mut(k)[by * np + bx] = off_w / z;
            }
        }
    }
    Ok(BlockActivation {
        detection,
        pooling,
        off,
        pool,
    })
}

/// Bottom-up pass, crop, block softmax: the layer's posterior given `v`.
pub fn infer(v: &Tensor, layer: &CrbmLayer) -> Result<BlockActivation> {
    block_probs(&crop_for_pooling(&bottom_up(v, layer)?, layer.pool)?, layer.pool)
}

/// Draw binary detection states, at most one unit on per block.
pub fn sample_block(probs: &BlockActivation, rng: &mut SeededRng) -> Result<Tensor> {
    let (k_count, n, _) = probs.detection.dims3()?;
    let pool = probs.pool;
    let np = n / pool;
    let mut out = Tensor::zeros(&[k_count, n, n]);
    let mut weights = vec![0.0; pool * pool + 1];
    for k in 0..k_count {
        let det = probs.detection.slab(k);
        let off = probs.off.slab(k);
        for by in 0..np {
            for bx in 0..np {
                let cell = |t: usize| (by * pool + t / pool) * n + bx * pool + t % pool;
                for (t, w) in weights.iter_mut().take(pool * pool).enumerate() {
                    *w = det[cell(t)];
                }
                weights[pool * pool] = off[by * np + bx];
                let pick = rng.categorical(&weights)?;
                if pick < pool * pool {
                    out.slab_mut(k)[cell(pick)] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Top-down linear term `sum_k conv(h[k], W[k, c])` without the bias,
/// `[C_in x (N_H + N_W - 1)^2]`.
pub(crate) fn top_down(h: &Tensor, layer: &CrbmLayer) -> Result<Tensor> {
    let (k_count, nh, m) = h.dims3()?;
    if k_count != layer.filter_count() || nh != m {
        return Err(Error::dim(format!(
            "hidden map {k_count}x{nh}x{m} does not match {} filters",
            layer.filter_count()
        )));
    }
    let nw = layer.filter_size();
    let nv = nh + nw - 1;
    let mut out = Tensor::zeros(&[layer.in_channels(), nv, nv]);
    for c in 0..layer.in_channels() {
        let dst = out.slab_mut(c);
        for k in 0..k_count {
            let flipped = flip180_slice(layer.kernel(k, c));
            correlate_full_acc(h.slab(k), (nh, nh), &flipped, (nw, nw), dst);
        }
    }
    Ok(out)
}

/// Mean of the Gaussian visible units given full-size hidden states `h`.
pub fn visible_conditional(h: &Tensor, layer: &CrbmLayer) -> Result<Tensor> {
    let mut mean = top_down(h, layer)?;
    let c = layer.visible_bias;
    mean.data_mut().iter_mut().for_each(|x| *x += c);
    Ok(mean)
}

/// Energy of a joint configuration, with `h` at full detection size. Units
/// in the cropped margin must be off and every block holds at most one on unit.
pub fn energy(v: &Tensor, h: &Tensor, layer: &CrbmLayer) -> Result<f64> {
    let (_, nv) = check_input(v, layer)?;
    let g = layer.geometry(nv)?;
    let (k_count, nh, m) = h.dims3()?;
    if k_count != layer.filter_count() || nh != g.detection || m != nh {
        return Err(Error::dim("hidden states do not match the layer geometry"));
    }
    let pool = layer.pool;
    for k in 0..k_count {
        let hk = h.slab(k);
        for y in 0..nh {
            for x in 0..nh {
                let s = hk[y * nh + x];
                if s != 0.0 && s != 1.0 {
                    return Err(Error::contract("hidden states must be binary"));
                }
                if s == 1.0 && (y >= g.retained || x >= g.retained) {
                    return Err(Error::contract("hidden unit on outside the pooled region"));
                }
            }
        }
        for by in 0..g.pooled {
            for bx in 0..g.pooled {
                let on: f64 = (0..pool * pool)
                    .map(|t| hk[(by * pool + t / pool) * nh + bx * pool + t % pool])
                    .sum();
                if on > 1.0 {
                    return Err(Error::contract(format!(
                        "pooling block ({by}, {bx}) of filter {k} has {on} units on"
                    )));
                }
            }
        }
    }
    let signal = bottom_up(v, layer)?;
    let interaction: f64 = signal.dot(h);
    let quadratic = 0.5 * v.dot(v);
    let visible = layer.visible_bias * v.data().iter().sum::<f64>();
    // bottom_up already folds the hidden bias into the interaction term
    Ok(-interaction + quadratic - visible)
}
