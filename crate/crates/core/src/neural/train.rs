use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Mode, Net};
use super::optim::{Optimizer, OptimizerState};
use super::{NeuralError, Scalar, Tensor};
use crate::gmm::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Regularizer {
    #[default]
    None,
    L1 { coef: f64 },
    L2 { coef: f64 },
}

impl Regularizer {
    pub fn penalty<T: Scalar>(&self, w: &[T]) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L1 { coef } => coef * w.iter().map(|v| v.to_f64().unwrap().abs()).sum::<f64>(),
            Regularizer::L2 { coef } => coef * w.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>(),
        }
    }

    /// Adds the penalty gradient (`coef * sign(w)` or `2 coef w`) to `g`.
    pub fn add_grad<T: Scalar>(&self, w: &[T], g: &mut [T]) {
        match *self {
            Regularizer::None => {}
            Regularizer::L1 { coef } => {
                let c = T::lit(coef);
                for (g, &w) in g.iter_mut().zip(w) {
                    if w != T::zero() {
                        *g += c * w.signum();
                    }
                }
            }
            Regularizer::L2 { coef } => {
                let c = T::lit(2.0 * coef);
                g.iter_mut().zip(w).for_each(|(g, &w)| *g += c * w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub regularizer: Regularizer,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(),
            batch_size: 32,
            epochs: 30,
            seed: 0,
            regularizer: Regularizer::None,
            patience: None,
            bn_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NeuralError::Config("batch size and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(NeuralError::Config("batch-norm momentum must be in [0, 1)".into()));
        }
        match self.regularizer {
            Regularizer::L1 { coef } | Regularizer::L2 { coef } if !(coef >= 0.0 && coef.is_finite()) => {
                Err(NeuralError::Config("regularizer coefficient must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Examples with a leading batch axis and one class index each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>) -> Result<Self, NeuralError> {
        if x.batch() != y.len() {
            return Err(NeuralError::Shape {
                layer: 0,
                msg: format!("{} examples but {} labels", x.batch(), y.len()),
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were retained, when validation data was given.
    pub best_epoch: Option<usize>,
}

impl History {
    /// `epoch,loss,val_acc` rows; empty accuracy when there was no validation set.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_acc\n");
        for r in &self.records {
            let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, acc));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub net: Net<T>,
    pub history: History,
}

/// Inference-mode probabilities, evaluated in chunks of `batch` examples.
pub fn predict_proba<T: Scalar>(net: &Net<T>, x: &Tensor<T>, batch: usize) -> Result<Tensor<T>, NeuralError> {
    let n = x.batch();
    let classes = net.classes();
    let mut out = Vec::with_capacity(n * classes);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        out.extend_from_slice(net.predict(&x.select(chunk))?.data());
    }
    Tensor::from_vec(&[n, classes], out)
}

fn accuracy<T: Scalar>(net: &Net<T>, data: &Dataset<T>, batch: usize) -> Result<f64, NeuralError> {
    let p = predict_proba(net, &data.x, batch)?;
    let classes = net.classes();
    let correct = p
        .data()
        .chunks_exact(classes)
        .zip(&data.y)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch training with per-epoch seeded shuffling. With validation data
/// the parameters of the best-validation epoch are returned.
pub fn train<T: Scalar>(
    mut net: Net<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    validation: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>, NeuralError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let classes = net.classes();
    if let Some(&bad) = data.y.iter().find(|&&y| y >= classes) {
        return Err(NeuralError::BadLabel { label: bad, classes });
    }
    let mask = net.kernel_mask();
    let mut opt = OptimizerState::new(cfg.optimizer, net.params());
    let mut history = History::default();
    let mut best: Option<(f64, Net<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = data.x.select(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | bi as u64);
            let (_, cache) = net.forward(&xb, Mode::Train { seed })?;
            let (loss, mut grads) = net.backward_ce(&cache, &yb)?;
            let mut loss = loss.to_f64().unwrap();
            if cfg.regularizer != Regularizer::None {
                for ((lg, lp), lm) in grads.iter_mut().zip(net.params()).zip(&mask) {
                    for ((g, p), &is_kernel) in lg.iter_mut().zip(lp).zip(lm) {
                        if is_kernel {
                            loss += cfg.regularizer.penalty(p.data());
                            cfg.regularizer.add_grad(p.data(), g.data_mut());
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(NeuralError::Diverged { epoch });
            }
            loss_sum += loss * idx.len() as f64;
            opt.step(net.params_mut(), &grads);
            net.update_running_stats(&cache, cfg.bn_momentum)?;
        }
        if net.params().iter().flatten().any(|t| !t.is_finite()) {
            return Err(NeuralError::Diverged { epoch });
        }
        let val_accuracy = validation.map(|v| accuracy(&net, v, 256)).transpose()?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            val_accuracy,
        });
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, net.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, b)) = best {
        net = b;
    }
    Ok(TrainOutcome { net, history })
}
