use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward};
use super::gru::{bidirectional_backward, bidirectional_forward, gru_backward, gru_forward, GruCache};
use super::net::Mode;
use super::spec::LayerSpec;
use super::{NeuralError, Scalar, Tensor};

pub(crate) const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Dense { x: Tensor<T> },
    Relu { x: Tensor<T> },
    BatchNorm(BnCache<T>),
    Dropout { mask: Option<Vec<T>> },
    Conv2d { x: Tensor<T> },
    MaxPool2 { in_shape: Vec<usize>, argmax: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Gru(GruCache<T>),
    Bidirectional(GruCache<T>, GruCache<T>),
    Softmax { x: Tensor<T>, probs: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics in train mode; used to update running averages.
    pub(crate) batch_mean: Vec<T>,
    pub(crate) batch_var: Vec<T>,
    train: bool,
}

impl<T> LayerCache<T> {
    pub(crate) fn matches(&self, spec: &LayerSpec) -> bool {
        matches!(
            (self, spec),
            (LayerCache::Dense { .. }, LayerSpec::Dense { .. })
                | (LayerCache::Relu { .. }, LayerSpec::Relu)
                | (LayerCache::BatchNorm(_), LayerSpec::BatchNorm)
                | (LayerCache::Dropout { .. }, LayerSpec::Dropout { .. })
                | (LayerCache::Conv2d { .. }, LayerSpec::Conv2d { .. })
                | (LayerCache::MaxPool2 { .. }, LayerSpec::MaxPool2)
                | (LayerCache::Flatten { .. }, LayerSpec::Flatten)
                | (LayerCache::Gru(_), LayerSpec::Gru { .. })
                | (LayerCache::Bidirectional(..), LayerSpec::Bidirectional { .. })
                | (LayerCache::Softmax { .. }, LayerSpec::Softmax { .. })
        )
    }
}

fn shape_err(msg: String) -> NeuralError {
    NeuralError::Shape { layer: 0, msg }
}

fn check_params<T: Scalar>(spec: &LayerSpec, in_item: &[usize], params: &[Tensor<T>], state: &[Tensor<T>]) -> Result<(), NeuralError> {
    let (ps, ss) = spec.param_shapes(in_item);
    let ok = ps.len() == params.len()
        && ss.len() == state.len()
        && ps.iter().zip(params).all(|(s, t)| s == t.shape())
        && ss.iter().zip(state).all(|(s, t)| s == t.shape());
    if ok {
        Ok(())
    } else {
        Err(shape_err(format!("{} parameters do not match input {in_item:?}", spec.name())))
    }
}

/// Runs one layer. `x` has a leading batch axis.
pub fn forward_layer<T: Scalar>(
    spec: &LayerSpec,
    params: &[Tensor<T>],
    state: &[Tensor<T>],
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, LayerCache<T>), NeuralError> {
    if x.shape().len() < 2 || x.batch() == 0 {
        return Err(shape_err(format!("input {:?} lacks a non-empty batch axis", x.shape())));
    }
    let item = &x.shape()[1..];
    let out_item = spec.output_shape(item).map_err(shape_err)?;
    check_params(spec, item, params, state)?;
    let mut out_shape = vec![x.batch()];
    out_shape.extend_from_slice(&out_item);

    Ok(match *spec {
        LayerSpec::Dense { units } => {
            let y = dense_forward(x, &params[0], &params[1], units, &out_shape);
            (y, LayerCache::Dense { x: x.clone() })
        }
        LayerSpec::Relu => {
            let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
            (y, LayerCache::Relu { x: x.clone() })
        }
        LayerSpec::BatchNorm => {
            let (y, c) = batchnorm_forward(x, params, state, matches!(mode, Mode::Train { .. }));
            (y, LayerCache::BatchNorm(c))
        }
        LayerSpec::Dropout { rate } => match mode {
            Mode::Train { seed } if rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = T::lit(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect();
                let mut y = x.clone();
                y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= *m);
                (y, LayerCache::Dropout { mask: Some(mask) })
            }
            _ => (x.clone(), LayerCache::Dropout { mask: None }),
        },
        LayerSpec::Conv2d { .. } => {
            let y = conv2d_forward(x, &params[0], &params[1]);
            (y, LayerCache::Conv2d { x: x.clone() })
        }
        LayerSpec::MaxPool2 => {
            let (y, argmax) = maxpool_forward(x);
            (
                y,
                LayerCache::MaxPool2 {
                    in_shape: x.shape().to_vec(),
                    argmax,
                },
            )
        }
        LayerSpec::Flatten => (
            x.clone().reshape(&out_shape)?,
            LayerCache::Flatten {
                in_shape: x.shape().to_vec(),
            },
        ),
        LayerSpec::Gru {
            reverse,
            return_sequences,
            ..
        } => {
            let (y, c) = gru_forward(x, &params[0], &params[1], &params[2], reverse, return_sequences);
            (y, LayerCache::Gru(c))
        }
        LayerSpec::Bidirectional { return_sequences, .. } => {
            let (y, f, b) = bidirectional_forward(x, params, return_sequences);
            (y, LayerCache::Bidirectional(f, b))
        }
        LayerSpec::Softmax { classes } => {
            let mut z = dense_forward(x, &params[0], &params[1], classes, &out_shape);
            softmax_rows(z.data_mut(), classes);
            (z.clone(), LayerCache::Softmax { x: x.clone(), probs: z })
        }
    })
}

/// Backpropagates `grad_out` through one layer. Returns the input gradient
/// and one gradient per trainable tensor. For the softmax layer `grad_out`
/// is taken with respect to the probabilities.
pub fn backward_layer<T: Scalar>(
    spec: &LayerSpec,
    params: &[Tensor<T>],
    cache: &LayerCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>), NeuralError> {
    if !cache.matches(spec) {
        return Err(NeuralError::StaleCache);
    }
    Ok(match (spec, cache) {
        (LayerSpec::Dense { .. }, LayerCache::Dense { x }) => dense_backward(x, &params[0], grad_out),
        (LayerSpec::Relu, LayerCache::Relu { x }) => {
            let mut g = grad_out.clone();
            g.data_mut()
                .iter_mut()
                .zip(x.data())
                .for_each(|(g, &v)| if v <= T::zero() { *g = T::zero() });
            (g, vec![])
        }
        (LayerSpec::BatchNorm, LayerCache::BatchNorm(c)) => batchnorm_backward(grad_out, &params[0], c),
        (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
            let mut g = grad_out.clone();
            if let Some(m) = mask {
                g.data_mut().iter_mut().zip(m).for_each(|(g, m)| *g *= *m);
            }
            (g, vec![])
        }
        (LayerSpec::Conv2d { .. }, LayerCache::Conv2d { x }) => conv2d_backward(x, &params[0], grad_out),
        (LayerSpec::MaxPool2, LayerCache::MaxPool2 { in_shape, argmax }) => {
            (maxpool_backward(in_shape, argmax, grad_out), vec![])
        }
        (LayerSpec::Flatten, LayerCache::Flatten { in_shape }) => (grad_out.clone().reshape(in_shape)?, vec![]),
        (LayerSpec::Gru { .. }, LayerCache::Gru(c)) => gru_backward(&params[0], &params[1], c, grad_out),
        (LayerSpec::Bidirectional { .. }, LayerCache::Bidirectional(f, b)) => bidirectional_backward(params, f, b, grad_out),
        (LayerSpec::Softmax { classes }, LayerCache::Softmax { x, probs }) => {
            let mut dz = grad_out.clone();
            for (row, p) in dz.data_mut().chunks_exact_mut(*classes).zip(probs.data().chunks_exact(*classes)) {
                let dot: T = row.iter().zip(p).map(|(&g, &p)| g * p).sum();
                row.iter_mut().zip(p).for_each(|(g, &p)| *g = p * (*g - dot));
            }
            dense_backward(x, &params[0], &dz)
        }
        _ => return Err(NeuralError::StaleCache),
    })
}

/// Softmax-layer backward from logit gradients (fused cross-entropy path).
pub(crate) fn softmax_backward_from_logits<T: Scalar>(
    params: &[Tensor<T>],
    cache: &LayerCache<T>,
    dlogits: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>), NeuralError> {
    match cache {
        LayerCache::Softmax { x, .. } => Ok(dense_backward(x, &params[0], dlogits)),
        _ => Err(NeuralError::StaleCache),
    }
}

pub(crate) fn softmax_rows<T: Scalar>(data: &mut [T], classes: usize) {
    for row in data.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, units: usize, out_shape: &[usize]) -> Tensor<T> {
    let fin = w.shape()[0];
    let n = x.len() / fin;
    let mut y = Tensor::zeros(out_shape);
    for row in y.data_mut().chunks_exact_mut(units) {
        row.copy_from_slice(b.data());
    }
    T::gemm(n, fin, units, T::one(), x.data(), false, w.data(), false, T::one(), y.data_mut());
    y
}

fn dense_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (fin, units) = (w.shape()[0], w.shape()[1]);
    let n = x.len() / fin;
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(fin, n, units, T::one(), x.data(), true, g.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[units]);
    for row in g.data().chunks_exact(units) {
        db.data_mut().iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(n, units, fin, T::one(), g.data(), false, w.data(), true, T::zero(), dx.data_mut());
    (dx, vec![dw, db])
}

/// `(outer, features, inner)` such that element `(o, f, i)` sits at
/// `(o * features + f) * inner + i`.
fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    if shape.len() == 4 {
        (shape[0], shape[1], shape[2] * shape[3])
    } else {
        let f = *shape.last().unwrap();
        (shape.iter().product::<usize>() / f, f, 1)
    }
}

fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, params: &[Tensor<T>], state: &[Tensor<T>], train: bool) -> (Tensor<T>, BnCache<T>) {
    let (outer, feat, inner) = bn_layout(x.shape());
    let count = T::from_usize(outer * inner).unwrap();
    let eps = T::lit(BN_EPS);
    let (mean, var) = if train {
        let mut mean = vec![T::zero(); feat];
        let mut var = vec![T::zero(); feat];
        for o in 0..outer {
            for f in 0..feat {
                let base = (o * feat + f) * inner;
                mean[f] += x.data()[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for f in 0..feat {
                let base = (o * feat + f) * inner;
                var[f] += x.data()[base..base + inner]
                    .iter()
                    .map(|&v| (v - mean[f]) * (v - mean[f]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    } else {
        (state[0].data().to_vec(), state[1].data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gamma, beta) = (params[0].data(), params[1].data());
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = Tensor::zeros(x.shape());
    for o in 0..outer {
        for f in 0..feat {
            let base = (o * feat + f) * inner;
            for i in base..base + inner {
                let h = (x.data()[i] - mean[f]) * inv_std[f];
                xhat[i] = h;
                y.data_mut()[i] = gamma[f] * h + beta[f];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    )
}

fn batchnorm_backward<T: Scalar>(g: &Tensor<T>, gamma: &Tensor<T>, c: &BnCache<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (outer, feat, inner) = bn_layout(g.shape());
    let mut dgamma = Tensor::zeros(&[feat]);
    let mut dbeta = Tensor::zeros(&[feat]);
    for o in 0..outer {
        for f in 0..feat {
            let base = (o * feat + f) * inner;
            for i in base..base + inner {
                dgamma.data_mut()[f] += g.data()[i] * c.xhat[i];
                dbeta.data_mut()[f] += g.data()[i];
            }
        }
    }
    let mut dx = Tensor::zeros(g.shape());
    let count = T::from_usize(outer * inner).unwrap();
    for o in 0..outer {
        for f in 0..feat {
            let base = (o * feat + f) * inner;
            let scale = gamma.data()[f] * c.inv_std[f];
            for i in base..base + inner {
                dx.data_mut()[i] = if c.train {
                    scale * (g.data()[i] - dbeta.data()[f] / count - c.xhat[i] * dgamma.data()[f] / count)
                } else {
                    scale * g.data()[i]
                };
            }
        }
    }
    (dx, vec![dgamma, dbeta])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_squared_loss_gradient() {
        // x = [1, 2], W = [[0.5, -1], [2, 0]], y = [1, 1]
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let spec = LayerSpec::Dense { units: 2 };
        let (out, cache) = forward_layer(&spec, &[w.clone(), b.clone()], &[], &x, Mode::Infer).unwrap();
        assert_eq!(out.data(), &[4.5, -1.0]);
        let resid: Vec<f64> = out.data().iter().map(|v| 2.0 * (v - 1.0)).collect();
        let g = Tensor::from_vec(&[1, 2], resid).unwrap();
        let (_, grads) = backward_layer(&spec, &[w, b], &cache, &g).unwrap();
        // 2 x' (xW - y) = [[1*7, 1*-4], [2*7, 2*-4]]
        assert_eq!(grads[0].data(), &[7.0, -4.0, 14.0, -8.0]);
    }

    #[test]
    fn zero_input_gives_uniform_softmax() {
        let spec = LayerSpec::Softmax { classes: 15 };
        let w = Tensor::from_vec(&[4, 15], (0..60).map(|i| i as f64 * 0.1).collect()).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        let (p, _) = forward_layer(&spec, &[w, Tensor::zeros(&[15])], &[], &x, Mode::Infer).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
    }

    #[test]
    fn stale_cache_rejected() {
        let spec = LayerSpec::Relu;
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, -1.0]).unwrap();
        let (_, cache) = forward_layer(&spec, &[], &[], &x, Mode::Infer).unwrap();
        let err = backward_layer(&LayerSpec::Flatten, &[], &cache, &x).unwrap_err();
        assert_eq!(err, NeuralError::StaleCache);
    }
}
