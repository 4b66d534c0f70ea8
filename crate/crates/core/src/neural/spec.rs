use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NeuralError;

/// One layer descriptor. Shapes exclude the batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Affine map on the last axis.
    Dense { units: usize },
    Relu,
    /// Per-feature on the last axis, or per-channel for `[C, H, W]` inputs.
    BatchNorm,
    /// Inverted dropout; identity at inference.
    Dropout { rate: f64 },
    /// 3×3 convolution, stride 1, zero "same" padding, on `[C, H, W]`.
    Conv2d { filters: usize },
    /// 2×2 max-pool, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Flatten,
    /// GRU over `[T, F]`. `reverse` runs right to left; without
    /// `return_sequences` the output is the final state.
    Gru {
        units: usize,
        reverse: bool,
        return_sequences: bool,
    },
    /// Forward and reverse GRUs, outputs concatenated on the feature axis.
    Bidirectional { units: usize, return_sequences: bool },
    /// Dense projection to `classes` followed by softmax. Must be last.
    Softmax { classes: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Gru { .. } => "gru",
            LayerSpec::Bidirectional { .. } => "bidirectional",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }

    /// Output shape for `input`, or a description of the incompatibility.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        if input.is_empty() || input.contains(&0) {
            return Err(format!("degenerate input shape {input:?}"));
        }
        match *self {
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err("dense units must be >= 1".into());
                }
                let mut s = input.to_vec();
                *s.last_mut().unwrap() = units;
                Ok(s)
            }
            LayerSpec::Relu | LayerSpec::BatchNorm => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..=0.5).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 0.5]"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Conv2d { filters } => match input {
                [_, h, w] if filters > 0 => Ok(vec![filters, *h, *w]),
                [_, _, _] => Err("conv2d filters must be >= 1".into()),
                _ => Err(format!("conv2d needs [channels, height, width], got {input:?}")),
            },
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("maxpool2 needs [channels, >=2, >=2], got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Gru {
                units,
                return_sequences,
                ..
            }
            | LayerSpec::Bidirectional {
                units,
                return_sequences,
            } => {
                let [t, _] = input else {
                    return Err(format!("recurrent layer needs [time, features], got {input:?}"));
                };
                if units == 0 {
                    return Err("recurrent units must be >= 1".into());
                }
                let width = if matches!(self, LayerSpec::Bidirectional { .. }) {
                    2 * units
                } else {
                    units
                };
                Ok(if return_sequences { vec![*t, width] } else { vec![width] })
            }
            LayerSpec::Softmax { classes } => match input {
                [_] if classes >= 2 => Ok(vec![classes]),
                [_] => Err("softmax needs >= 2 classes".into()),
                _ => Err(format!("softmax needs a flat feature vector, got {input:?}")),
            },
        }
    }

    /// Shapes of trainable tensors and of non-trainable state tensors.
    pub fn param_shapes(&self, input: &[usize]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let last = *input.last().unwrap();
        match *self {
            LayerSpec::Dense { units } => (vec![vec![last, units], vec![units]], vec![]),
            LayerSpec::Softmax { classes } => (vec![vec![last, classes], vec![classes]], vec![]),
            LayerSpec::BatchNorm => {
                let f = if input.len() == 3 { input[0] } else { last };
                (vec![vec![f], vec![f]], vec![vec![f], vec![f]])
            }
            LayerSpec::Conv2d { filters } => (vec![vec![filters, input[0] * 9], vec![filters]], vec![]),
            LayerSpec::Gru { units, .. } => (gru_shapes(last, units), vec![]),
            LayerSpec::Bidirectional { units, .. } => {
                let mut s = gru_shapes(last, units);
                s.extend(gru_shapes(last, units));
                (s, vec![])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::MaxPool2 | LayerSpec::Flatten => (vec![], vec![]),
        }
    }
}

fn gru_shapes(features: usize, units: usize) -> Vec<Vec<usize>> {
    // Gate order within the 3U axis: update, reset, candidate.
    vec![vec![features, 3 * units], vec![units, 3 * units], vec![3 * units]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self, NeuralError> {
        let s = Self { input_shape, layers };
        s.shapes()?;
        Ok(s)
    }

    /// Input shape of every layer followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NeuralError> {
        if self.layers.is_empty() {
            return Err(NeuralError::Spec("no layers".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Softmax { .. }) != (i + 1 == self.layers.len()) {
                return Err(NeuralError::Spec("exactly one softmax layer, in last position, is required".into()));
            }
            let out = l
                .output_shape(shapes.last().unwrap())
                .map_err(|msg| NeuralError::Shape { layer: i, msg })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax { classes }) => *classes,
            _ => 0,
        }
    }

    /// Total trainable and state element counts.
    pub fn param_counts(&self) -> Result<(usize, usize), NeuralError> {
        let shapes = self.shapes()?;
        let mut trainable = 0;
        let mut state = 0;
        for (l, input) in self.layers.iter().zip(&shapes) {
            let (t, s) = l.param_shapes(input);
            trainable += t.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
            state += s.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
        }
        Ok((trainable, state))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dnn,
    Rnn,
    Cnn,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" => Ok(ModelKind::Dnn),
            "rnn" => Ok(ModelKind::Rnn),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(format!("unknown network kind '{other}'")),
        }
    }
}

/// How the two 256-unit GRU rows of the RNN column are realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnLayout {
    /// One bidirectional layer: a forward and a reverse GRU side by side.
    #[default]
    Bidirectional,
    /// A forward GRU feeding a reverse GRU.
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Options {
    pub classes: usize,
    pub dnn_units: usize,
    pub rnn_units: usize,
    pub rnn_layout: RnnLayout,
    pub cnn_filters: [usize; 3],
    /// Overrides every dropout rate of the chosen architecture.
    pub dropout: Option<f64>,
}

/// Largest accepted dropout override.
pub const MAX_DROPOUT: f64 = 0.5;

impl Default for Table1Options {
    fn default() -> Self {
        Self {
            classes: 15,
            dnn_units: 256,
            rnn_units: 256,
            rnn_layout: RnnLayout::Bidirectional,
            cnn_filters: [32, 64, 128],
            dropout: None,
        }
    }
}

/// Builds the reference DNN, RNN or CNN.
///
/// Input shapes: DNN `[features]`; RNN `[frames, features]`; CNN
/// `[channels, bands, frames]` or `[bands, frames]` (one channel).
pub fn build_table1(kind: ModelKind, input_shape: &[usize], opts: &Table1Options) -> Result<NetSpec, NeuralError> {
    use LayerSpec::*;
    if let Some(r) = opts.dropout {
        if !(0.0..=MAX_DROPOUT).contains(&r) {
            return Err(NeuralError::Spec(format!("dropout {r} outside [0, {MAX_DROPOUT}]")));
        }
    }
    let rate = |default: f64| Dropout {
        rate: opts.dropout.unwrap_or(default),
    };
    let mut layers = Vec::new();
    let input = match kind {
        ModelKind::Dnn => {
            let [f] = input_shape else {
                return Err(NeuralError::Spec(format!("dnn expects [features], got {input_shape:?}")));
            };
            for _ in 0..4 {
                layers.extend([Dense { units: opts.dnn_units }, BatchNorm, Relu, rate(0.2)]);
            }
            vec![*f]
        }
        ModelKind::Rnn => {
            let [_, _] = input_shape else {
                return Err(NeuralError::Spec(format!("rnn expects [frames, features], got {input_shape:?}")));
            };
            let u = opts.rnn_units;
            match opts.rnn_layout {
                RnnLayout::Bidirectional => layers.push(Bidirectional {
                    units: u,
                    return_sequences: false,
                }),
                RnnLayout::Stacked => layers.extend([
                    Gru {
                        units: u,
                        reverse: false,
                        return_sequences: true,
                    },
                    Gru {
                        units: u,
                        reverse: true,
                        return_sequences: false,
                    },
                ]),
            }
            layers.extend([rate(0.4), BatchNorm]);
            input_shape.to_vec()
        }
        ModelKind::Cnn => {
            let input = match input_shape {
                [h, w] => vec![1, *h, *w],
                [c, h, w] => vec![*c, *h, *w],
                _ => {
                    return Err(NeuralError::Spec(format!(
                        "cnn needs 2-D feature maps, got {input_shape:?}"
                    )))
                }
            };
            for &f in &opts.cnn_filters {
                layers.extend([
                    Conv2d { filters: f },
                    BatchNorm,
                    Relu,
                    Conv2d { filters: f },
                    BatchNorm,
                    Relu,
                    MaxPool2,
                    rate(0.3),
                ]);
            }
            layers.push(Flatten);
            input
        }
    };
    layers.push(Softmax { classes: opts.classes });
    NetSpec::new(input, layers)
}
