use serde::{Deserialize, Serialize};

use super::{NeuralError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    RmsProp { lr: f64, rho: f64, eps: f64 },
    Adagrad { lr: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { lr: 1e-2, momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }

    pub fn rmsprop() -> Self {
        Optimizer::RmsProp { lr: 1e-3, rho: 0.9, eps: 1e-7 }
    }

    pub fn adagrad() -> Self {
        Optimizer::Adagrad { lr: 1e-2, eps: 1e-7 }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sgd" => Some(Self::sgd()),
            "adam" => Some(Self::adam()),
            "rmsprop" => Some(Self::rmsprop()),
            "adagrad" => Some(Self::adagrad()),
            _ => None,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } | Optimizer::RmsProp { lr, .. } | Optimizer::Adagrad { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Config(m.to_string()));
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return bad("learning rate must be > 0");
        }
        match *self {
            Optimizer::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => bad("momentum must be in [0, 1)"),
            Optimizer::Adam { beta1, beta2, eps, .. }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                bad("adam needs betas in [0, 1) and eps > 0")
            }
            Optimizer::RmsProp { rho, eps, .. } if !((0.0..1.0).contains(&rho) && eps > 0.0) => bad("rmsprop needs rho in [0, 1) and eps > 0"),
            Optimizer::Adagrad { eps, .. } if eps <= 0.0 => bad("adagrad needs eps > 0"),
            _ => Ok(()),
        }
    }
}

/// Per-tensor moment buffers for one optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    opt: Optimizer,
    steps: u64,
    first: Vec<Vec<Vec<T>>>,
    second: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(opt: Optimizer, params: &[Vec<Tensor<T>>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|l| l.iter().map(|t| vec![T::zero(); t.len()]).collect())
                .collect()
        };
        Self {
            opt,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [Vec<Tensor<T>>], grads: &[Vec<Tensor<T>>]) {
        self.steps += 1;
        let t = self.steps as i32;
        for (li, (lp, lg)) in params.iter_mut().zip(grads).enumerate() {
            for (ti, (p, g)) in lp.iter_mut().zip(lg).enumerate() {
                let m = &mut self.first[li][ti];
                let v = &mut self.second[li][ti];
                let p = p.data_mut();
                let g = g.data();
                match self.opt {
                    Optimizer::Sgd { lr, momentum } => {
                        let (lr, mu) = (T::lit(lr), T::lit(momentum));
                        for i in 0..p.len() {
                            m[i] = mu * m[i] - lr * g[i];
                            p[i] += m[i];
                        }
                    }
                    Optimizer::Adam { lr, beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        let step = T::lit(lr * c2.sqrt() / c1);
                        let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps * c2.sqrt()));
                        for i in 0..p.len() {
                            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                            p[i] -= step * m[i] / (v[i].sqrt() + e);
                        }
                    }
                    Optimizer::RmsProp { lr, rho, eps } => {
                        let (lr, rho, e) = (T::lit(lr), T::lit(rho), T::lit(eps));
                        for i in 0..p.len() {
                            v[i] = rho * v[i] + (T::one() - rho) * g[i] * g[i];
                            p[i] -= lr * g[i] / (v[i].sqrt() + e);
                        }
                    }
                    Optimizer::Adagrad { lr, eps } => {
                        let (lr, e) = (T::lit(lr), T::lit(eps));
                        for i in 0..p.len() {
                            v[i] += g[i] * g[i];
                            p[i] -= lr * g[i] / (v[i].sqrt() + e);
                        }
                    }
                }
            }
        }
    }
}
