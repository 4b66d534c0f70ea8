use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::gru::gru_forward;
use super::layers::{backward_layer, forward_layer, softmax_backward_from_logits, LayerCache};
use super::spec::{LayerSpec, NetSpec};
use super::{NeuralError, Scalar, Tensor};
use crate::gmm::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, dropout masks drawn from `seed`.
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Infer,
}

/// Activations recorded by [`Net::forward`], bound to the parameter version
/// they were computed with.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    pub(crate) layers: Vec<LayerCache<T>>,
    spec_hash: u64,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct Net<T> {
    spec: NetSpec,
    shapes: Vec<Vec<usize>>,
    pub(crate) params: Vec<Vec<Tensor<T>>>,
    pub(crate) state: Vec<Vec<Tensor<T>>>,
    spec_hash: u64,
    version: u64,
}

/// Equal architecture, parameters and state; the cache version is ignored.
impl<T: PartialEq> PartialEq for Net<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.state == other.state
    }
}

fn spec_hash(spec: &NetSpec) -> u64 {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whether the next non-normalising layer after `i` is a ReLU.
fn feeds_relu(layers: &[LayerSpec], i: usize) -> bool {
    layers[i + 1..]
        .iter()
        .find(|l| !matches!(l, LayerSpec::BatchNorm | LayerSpec::Dropout { .. }))
        .is_some_and(|l| *l == LayerSpec::Relu)
}

impl<T: Scalar> Net<T> {
    /// Seeded initialisation: He-normal for kernels feeding a ReLU,
    /// Glorot-uniform otherwise; zero biases; unit batch-norm scale.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self, NeuralError> {
        let shapes = spec.shapes()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut state = Vec::with_capacity(spec.layers.len());
        for (i, (layer, input)) in spec.layers.iter().zip(&shapes).enumerate() {
            let (ps, ss) = layer.param_shapes(input);
            let he = feeds_relu(&spec.layers, i);
            let mut tensors = Vec::with_capacity(ps.len());
            for (k, shape) in ps.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (i * 16 + k) as u64));
                let t = match (layer, shape.len()) {
                    (LayerSpec::BatchNorm, _) if k == 0 => Tensor::from_vec(shape, vec![T::one(); shape[0]])?,
                    (_, 1) => Tensor::zeros(shape),
                    _ => {
                        let (fan_in, fan_out) = match layer {
                            LayerSpec::Conv2d { .. } => (shape[1], shape[0] * 9),
                            _ => (shape[0], shape[1]),
                        };
                        let n = shape.iter().product();
                        let data: Vec<T> = if he {
                            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                            (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
                        } else {
                            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
                            let d = Uniform::new_inclusive(-lim, lim).unwrap();
                            (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
                        };
                        Tensor::from_vec(shape, data)?
                    }
                };
                tensors.push(t);
            }
            params.push(tensors);
            let st = ss
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    if k == 1 {
                        Tensor::from_vec(s, vec![T::one(); s[0]])
                    } else {
                        Ok(Tensor::zeros(s))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            state.push(st);
        }
        let spec_hash = spec_hash(&spec);
        Ok(Self {
            spec,
            shapes,
            params,
            state,
            spec_hash,
            version: 0,
        })
    }

    /// Assembles a network from explicit tensors, validating every shape.
    pub fn from_parts(spec: NetSpec, params: Vec<Vec<Tensor<T>>>, state: Vec<Vec<Tensor<T>>>) -> Result<Self, NeuralError> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() || state.len() != spec.layers.len() {
            return Err(NeuralError::Format("layer count mismatch".into()));
        }
        for (i, (layer, input)) in spec.layers.iter().zip(&shapes).enumerate() {
            let (ps, ss) = layer.param_shapes(input);
            let ok = ps.len() == params[i].len()
                && ss.len() == state[i].len()
                && ps.iter().zip(&params[i]).all(|(s, t)| s == t.shape())
                && ss.iter().zip(&state[i]).all(|(s, t)| s == t.shape());
            if !ok {
                return Err(NeuralError::Shape {
                    layer: i,
                    msg: "parameter shapes do not match spec".into(),
                });
            }
        }
        let spec_hash = spec_hash(&spec);
        Ok(Self {
            spec,
            shapes,
            params,
            state,
            spec_hash,
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn state(&self) -> &[Vec<Tensor<T>>] {
        &self.state
    }

    /// Mutable parameters. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<T>>] {
        self.version += 1;
        &mut self.params
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().flatten().map(|t| t.len()).sum()
    }

    /// Per layer, whether each trainable tensor is a weight kernel (subject
    /// to regularisation) rather than a bias or normalisation parameter.
    pub fn kernel_mask(&self) -> Vec<Vec<bool>> {
        self.spec
            .layers
            .iter()
            .zip(&self.params)
            .map(|(l, ps)| {
                (0..ps.len())
                    .map(|k| match l {
                        LayerSpec::Dense { .. } | LayerSpec::Softmax { .. } | LayerSpec::Conv2d { .. } => k == 0,
                        LayerSpec::Gru { .. } | LayerSpec::Bidirectional { .. } => k % 3 != 2,
                        _ => false,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>), NeuralError> {
        if x.shape().len() < 2 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(NeuralError::Shape {
                layer: 0,
                msg: format!("input {:?} does not match [batch] + {:?}", x.shape(), self.spec.input_shape),
            });
        }
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let m = match mode {
                Mode::Train { seed } => Mode::Train {
                    seed: derive_seed(seed, i as u64),
                },
                Mode::Infer => Mode::Infer,
            };
            let (out, c) = forward_layer(layer, &self.params[i], &self.state[i], &h, m).map_err(|e| match e {
                NeuralError::Shape { msg, .. } => NeuralError::Shape { layer: i, msg },
                other => other,
            })?;
            h = out;
            caches.push(c);
        }
        Ok((
            h,
            Cache {
                layers: caches,
                spec_hash: self.spec_hash,
                version: self.version,
            },
        ))
    }

    /// Hidden states `[batch, time, units]` of recurrent layer `layer` in
    /// inference mode, in input time order. For a bidirectional layer
    /// `backward` selects the reverse direction.
    pub fn recurrent_states(&self, x: &Tensor<T>, layer: usize, backward: bool) -> Result<Tensor<T>, NeuralError> {
        let spec = self.spec.layers.get(layer).ok_or_else(|| NeuralError::Spec(format!("no layer {layer}")))?;
        let p = &self.params[layer];
        let (w, u, b, reverse) = match *spec {
            LayerSpec::Gru { reverse, .. } => (&p[0], &p[1], &p[2], reverse),
            LayerSpec::Bidirectional { .. } if backward => (&p[3], &p[4], &p[5], true),
            LayerSpec::Bidirectional { .. } => (&p[0], &p[1], &p[2], false),
            _ => return Err(NeuralError::Spec(format!("layer {layer} ({}) is not recurrent", spec.name()))),
        };
        let mut h = x.clone();
        if h.shape().len() < 2 || h.shape()[1..] != self.spec.input_shape[..] {
            return Err(NeuralError::Shape {
                layer: 0,
                msg: format!("input {:?} does not match [batch] + {:?}", h.shape(), self.spec.input_shape),
            });
        }
        for i in 0..layer {
            h = forward_layer(&self.spec.layers[i], &self.params[i], &self.state[i], &h, Mode::Infer)?.0;
        }
        Ok(gru_forward(&h, w, u, b, reverse, true).0)
    }

    /// Class probabilities in inference mode.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        Ok(self.forward(x, Mode::Infer)?.0)
    }

    fn check_cache(&self, cache: &Cache<T>) -> Result<(), NeuralError> {
        if cache.spec_hash != self.spec_hash
            || cache.version != self.version
            || cache.layers.len() != self.spec.layers.len()
            || !cache.layers.iter().zip(&self.spec.layers).all(|(c, l)| c.matches(l))
        {
            return Err(NeuralError::StaleCache);
        }
        Ok(())
    }

    fn backward_from(
        &self,
        cache: &Cache<T>,
        mut g: Tensor<T>,
        mut grads: Vec<Vec<Tensor<T>>>,
        last: usize,
    ) -> Result<(Tensor<T>, Vec<Vec<Tensor<T>>>), NeuralError> {
        for i in (0..last).rev() {
            let (dx, pg) = backward_layer(&self.spec.layers[i], &self.params[i], &cache.layers[i], &g)?;
            grads[i] = pg;
            g = dx;
        }
        Ok((g, grads))
    }

    /// Gradients for an arbitrary gradient with respect to the output
    /// probabilities. Returns the input gradient and per-layer parameter
    /// gradients.
    pub fn backward(&self, cache: &Cache<T>, grad_probs: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<Tensor<T>>>), NeuralError> {
        self.check_cache(cache)?;
        let n = self.spec.layers.len();
        let grads = vec![Vec::new(); n];
        self.backward_from(cache, grad_probs.clone(), grads, n)
    }

    /// Mean cross-entropy over the batch and its parameter gradients, using
    /// the fused softmax gradient `(p - onehot) / B`.
    pub fn backward_ce(&self, cache: &Cache<T>, labels: &[usize]) -> Result<(T, Vec<Vec<Tensor<T>>>), NeuralError> {
        self.check_cache(cache)?;
        let n = self.spec.layers.len();
        let LayerCache::Softmax { probs, .. } = &cache.layers[n - 1] else {
            return Err(NeuralError::StaleCache);
        };
        let classes = self.classes();
        let b = probs.batch();
        if labels.len() != b {
            return Err(NeuralError::Shape {
                layer: n - 1,
                msg: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        let inv_b = T::one() / T::from_usize(b).unwrap();
        let mut dlogits = probs.clone();
        let mut loss = T::zero();
        let tiny = T::min_positive_value();
        for (row, &y) in dlogits.data_mut().chunks_exact_mut(classes).zip(labels) {
            if y >= classes {
                return Err(NeuralError::BadLabel { label: y, classes });
            }
            loss -= row[y].max(tiny).ln();
            row[y] -= T::one();
            row.iter_mut().for_each(|v| *v *= inv_b);
        }
        let mut grads = vec![Vec::new(); n];
        let (dx, pg) = softmax_backward_from_logits(&self.params[n - 1], &cache.layers[n - 1], &dlogits)?;
        grads[n - 1] = pg;
        let (_, grads) = self.backward_from(cache, dx, grads, n - 1)?;
        Ok((loss * inv_b, grads))
    }

    /// Moves batch-norm running statistics toward the batch statistics of
    /// a train-mode cache: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, cache: &Cache<T>, momentum: f64) -> Result<(), NeuralError> {
        if cache.spec_hash != self.spec_hash || cache.layers.len() != self.spec.layers.len() {
            return Err(NeuralError::StaleCache);
        }
        let m = T::lit(momentum);
        let one_m = T::one() - m;
        for (st, c) in self.state.iter_mut().zip(&cache.layers) {
            if let LayerCache::BatchNorm(bn) = c {
                for (r, &b) in st[0].data_mut().iter_mut().zip(&bn.batch_mean) {
                    *r = m * *r + one_m * b;
                }
                for (r, &b) in st[1].data_mut().iter_mut().zip(&bn.batch_var) {
                    *r = m * *r + one_m * b;
                }
            }
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> Net<U> {
        let conv = |ts: &Vec<Vec<Tensor<T>>>| {
            ts.iter()
                .map(|l| l.iter().map(|t| t.map(|v| U::from(v).unwrap())).collect())
                .collect()
        };
        Net {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: conv(&self.params),
            state: conv(&self.state),
            spec_hash: self.spec_hash,
            version: 0,
        }
    }
}
