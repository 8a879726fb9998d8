use super::block::{block_probs, bottom_up, crop_for_pooling, pad_detection, sample_block, top_down, visible_conditional};
use super::{BlockActivation, CdbnStack};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// State of every layer at the end of a chain. Detection maps are full size
/// (cropped margins stay off).
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsSample {
    pub visible: Tensor,
    pub detection: Vec<Tensor>,
    pub pooling: Vec<Tensor>,
}

/// Posterior of layer `l` given its input `below` and, if present, the
/// full-size detection states of layer `l + 1`. The upper layer's filters
/// couple its detection units to this layer's pooling units, so their
/// top-down signal is added to every unit of the matching block.
pub fn gibbs_conditional(
    stack: &CdbnStack,
    l: usize,
    below: &Tensor,
    above: Option<&Tensor>,
) -> Result<BlockActivation> {
    let layer = stack
        .layers
        .get(l)
        .ok_or_else(|| Error::dim(format!("no layer {l}")))?;
    let pool = layer.pool;
    let mut signal = crop_for_pooling(&bottom_up(below, layer)?, pool)?;
    if let Some(h_up) = above {
        let upper = stack
            .layers
            .get(l + 1)
            .ok_or_else(|| Error::dim(format!("layer {l} has no layer above")))?;
        let td = top_down(h_up, upper)?;
        let (k_count, n, _) = signal.dims3()?;
        let np = n / pool;
        if td.shape() != [k_count, np, np] {
            return Err(Error::dim("upper-layer states do not match the pooling map"));
        }
        for k in 0..k_count {
            let t = td.slab(k).to_vec();
            let s = signal.slab_mut(k);
            for y in 0..n {
                for x in 0..n {
                    s[y * n + x] += t[(y / pool) * np + x / pool];
                }
            }
        }
    }
    block_probs(&signal, pool)
}

fn pool_states(h: &Tensor, pool: usize) -> Result<Tensor> {
    let (k, n, _) = h.dims3()?;
    let np = n / pool;
    let mut out = Tensor::zeros(&[k, np, np]);
    for kk in 0..k {
        let src = h.slab(kk);
        let dst = out.slab_mut(kk);
        for y in 0..np * pool {
            for x in 0..np * pool {
                if src[y * n + x] == 1.0 {
                    dst[(y / pool) * np + x / pool] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Block Gibbs sampling over all hidden layers and the visible layer, for
/// `steps` sweeps started from `v`.
pub fn gibbs_sample_all(
    stack: &CdbnStack,
    v: &Tensor,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<GibbsSample> {
    if steps < 1 {
        return Err(Error::param("Gibbs sampling needs at least one sweep"));
    }
    let geo = stack.geometry()?;
    let depth = stack.layers.len();
    let visible = v.clone();
    let mut detection: Vec<Tensor> = Vec::with_capacity(depth);
    let mut pooling: Vec<Tensor> = Vec::with_capacity(depth);

    // initialize bottom-up, ignoring top-down input
    for l in 0..depth {
        let below = if l == 0 { &visible } else { &pooling[l - 1] };
        let act = gibbs_conditional(stack, l, below, None)?;
        let h = sample_block(&act, rng)?;
        pooling.push(pool_states(&h, stack.layers[l].pool)?);
        detection.push(pad_detection(&h, geo[l].detection)?);
    }

    let mut state = GibbsSample {
        visible: v.clone(),
        detection,
        pooling,
    };
    for _ in 0..steps {
        gibbs_sweep(stack, &mut state, rng)?;
    }
    Ok(state)
}

/// One systematic sweep: every hidden layer bottom to top, then the visible layer.
pub fn gibbs_sweep(stack: &CdbnStack, state: &mut GibbsSample, rng: &mut SeededRng) -> Result<()> {
    let geo = stack.geometry()?;
    let depth = stack.layers.len();
    if state.detection.len() != depth || state.pooling.len() != depth {
        return Err(Error::dim("chain state does not match the stack depth"));
    }
    for l in 0..depth {
        let act = {
            let above = state.detection.get(l + 1);
            let below = if l == 0 { &state.visible } else { &state.pooling[l - 1] };
            gibbs_conditional(stack, l, below, above)?
        };
        let h = sample_block(&act, rng)?;
        state.pooling[l] = pool_states(&h, stack.layers[l].pool)?;
        state.detection[l] = pad_detection(&h, geo[l].detection)?;
    }
    let mut visible = visible_conditional(&state.detection[0], &stack.layers[0])?;
    for x in visible.data_mut() {
        *x += rng.normal();
    }
    state.visible = visible;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crbm::{infer, CrbmLayer};

    fn tiny_stack(seed: u64) -> CdbnStack {
        let mut rng = SeededRng::new(seed, 3);
        let mut l1 = CrbmLayer::random(2, 1, 2, 2, 0.25, &mut rng).unwrap();
        let mut l2 = CrbmLayer::random(2, 2, 1, 1, 0.5, &mut rng).unwrap();
        l1.hidden_bias = vec![-0.3, 0.2];
        l1.visible_bias = 0.1;
        l2.hidden_bias = vec![0.4, -0.5];
        let mut s = CdbnStack::new(vec![l1, l2], 1, 3).unwrap();
        s.pretrained = true;
        s
    }

    #[test]
    fn zero_upper_filters_reduce_to_block_probs() {
        let mut stack = tiny_stack(1);
        stack.layers[1].filters.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let mut rng = SeededRng::new(2, 0);
        let v = Tensor::from_fn(&[1, 3, 3], |_| rng.normal());
        let h2 = Tensor::from_fn(&[2, 1, 1], |i| (i % 2) as f64);
        let got = gibbs_conditional(&stack, 0, &v, Some(&h2)).unwrap();
        assert_eq!(got, infer(&v, &stack.layers[0]).unwrap());
    }

    #[test]
    fn chains_are_deterministic() {
        let stack = tiny_stack(3);
        let v = Tensor::filled(&[1, 3, 3], 0.5);
        let a = gibbs_sample_all(&stack, &v, 50, &mut SeededRng::new(7, 1)).unwrap();
        let b = gibbs_sample_all(&stack, &v, 50, &mut SeededRng::new(7, 1)).unwrap();
        assert_eq!(a, b);
        assert!(gibbs_sample_all(&stack, &v, 0, &mut SeededRng::new(7, 1)).is_err());
    }

    // Exact marginals of the joint with the visible layer integrated out:
    // log P(h1, h2) = |td1(h1) + c|^2 / 2 + b1.h1 + h2.(W2 * p1 + b2) + const
    #[test]
    fn chain_marginals_match_joint_enumeration() {
        let stack = tiny_stack(5);
        let (l1, l2) = (&stack.layers[0], &stack.layers[1]);
        let mut states = Vec::new();
        for a in 0..5usize {
            for b in 0..5usize {
                for up in 0..4usize {
                    let mut h1 = Tensor::zeros(&[2, 2, 2]);
                    if a < 4 {
                        h1.set(&[0, a / 2, a % 2], 1.0);
                    }
                    if b < 4 {
                        h1.set(&[1, b / 2, b % 2], 1.0);
                    }
                    let h2 = Tensor::from_fn(&[2, 1, 1], |i| ((up >> i) & 1) as f64);
                    states.push((h1, h2));
                }
            }
        }
        let log_w: Vec<f64> = states
            .iter()
            .map(|(h1, h2)| {
                let m = visible_conditional(h1, l1).unwrap();
                let quad = 0.5 * m.dot(&m);
                let bias: f64 = (0..2).map(|k| l1.hidden_bias[k] * h1.slab(k).iter().sum::<f64>()).sum();
                let p1 = pool_states(h1, 2).unwrap();
                let upper = bottom_up(&p1, l2).unwrap().dot(h2);
                quad + bias + upper
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut exact_h1 = vec![0.0; 8];
        let mut exact_h2 = vec![0.0; 2];
        for ((h1, h2), wi) in states.iter().zip(&w) {
            for (e, x) in exact_h1.iter_mut().zip(h1.data()) {
                *e += wi * x / z;
            }
            for (e, x) in exact_h2.iter_mut().zip(h2.data()) {
                *e += wi * x / z;
            }
        }

        let mut rng = SeededRng::new(11, 0);
        let mut state = gibbs_sample_all(&stack, &Tensor::zeros(&[1, 3, 3]), 100, &mut rng).unwrap();
        let sweeps = 10_000;
        let mut emp_h1 = vec![0.0; 8];
        let mut emp_h2 = vec![0.0; 2];
        for _ in 0..sweeps {
            gibbs_sweep(&stack, &mut state, &mut rng).unwrap();
            for (e, x) in emp_h1.iter_mut().zip(state.detection[0].data()) {
                *e += x / sweeps as f64;
            }
            for (e, x) in emp_h2.iter_mut().zip(state.detection[1].data()) {
                *e += x / sweeps as f64;
            }
        }
        for (a, b) in emp_h1.iter().zip(&exact_h1).chain(emp_h2.iter().zip(&exact_h2)) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }
}
