//! End-to-end model fitting on feature sequences: standardization, one of
//! the five model families, clip-level probability outputs, cross-validation
//! and the `"SKP1"` trained-model file.
//!
//! Every model yields a probability row per clip:
//! * GMM: softmax of the per-frame mean log-likelihood of each class.
//! * i-vector: softmax of `10 · cosine` (or of the negative distance).
//! * DNN: mean of frame posteriors.
//! * RNN/CNN: mean of posteriors over non-overlapping fixed-length segments.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::*;
use crate::dsp::{DspError, FeatureKind, FeatureSequence, Standardizer};
use crate::eval::{aggregate_clip, cv_run, AggregateMode, CvSummary, EvalError, FoldPlan, Manifest};
use crate::gmm::{derive_seed, train_classifier, GmmClassifier, GmmError, GmmOptions};
use crate::ivector::{train_ivector_system, IVectorError, IVectorModel, IVectorOptions, Scoring};
use crate::matrix::Matrix;
use crate::neural::{
    build_table1, decode_net, encode_net, predict_proba, train, Dataset, ModelKind, Net, NeuralError, Table1Options,
    Tensor, TrainConfig,
};

pub const MODEL_MAGIC: &[u8; 4] = b"SKP1";
const COSINE_SCALE: f64 = 10.0;
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    IVector(#[from] IVectorError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmParams {
    pub components: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        let o = GmmOptions::default();
        Self {
            components: o.components,
            max_iters: o.max_iters,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IVectorParams {
    pub ubm_components: usize,
    pub ubm_iters: usize,
    pub rank: usize,
    pub t_iters: usize,
    pub scoring: Scoring,
    pub length_norm: bool,
}

impl Default for IVectorParams {
    fn default() -> Self {
        let o = IVectorOptions::default();
        Self {
            ubm_components: o.ubm_components,
            ubm_iters: o.ubm_iters,
            rank: o.rank,
            t_iters: o.t_iters,
            scoring: o.scoring,
            length_norm: o.length_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralParams {
    /// Architecture sizes; the class count is taken from the data.
    pub net: Table1Options,
    pub train: TrainConfig,
    /// Frames per RNN/CNN segment.
    pub segment_frames: usize,
}

impl Default for NeuralParams {
    fn default() -> Self {
        Self {
            net: Table1Options::default(),
            train: TrainConfig::default(),
            segment_frames: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Gmm(GmmParams),
    Ivector(IVectorParams),
    Dnn(NeuralParams),
    Rnn(NeuralParams),
    Cnn(NeuralParams),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Gmm(GmmParams::default())
    }
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Gmm(_) => "gmm",
            ModelConfig::Ivector(_) => "ivector",
            ModelConfig::Dnn(_) => "dnn",
            ModelConfig::Rnn(_) => "rnn",
            ModelConfig::Cnn(_) => "cnn",
        }
    }

    fn neural(&self) -> Option<(ModelKind, &NeuralParams)> {
        match self {
            ModelConfig::Dnn(p) => Some((ModelKind::Dnn, p)),
            ModelConfig::Rnn(p) => Some((ModelKind::Rnn, p)),
            ModelConfig::Cnn(p) => Some((ModelKind::Cnn, p)),
            _ => None,
        }
    }

    /// Bounds checks that need no data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        match self {
            ModelConfig::Gmm(p) => {
                if p.components == 0 || p.max_iters == 0 || !(p.tol >= 0.0) {
                    return bad("gmm needs components >= 1, max_iters >= 1, tol >= 0".into());
                }
            }
            ModelConfig::Ivector(p) => {
                if p.ubm_components == 0 || p.rank == 0 || p.ubm_iters == 0 {
                    return bad("ivector needs ubm_components, ubm_iters and rank >= 1".into());
                }
            }
            _ => {
                let (kind, p) = self.neural().unwrap();
                if p.segment_frames == 0 {
                    return bad("segment_frames must be >= 1".into());
                }
                p.train.validate()?;
                // Building on a dummy shape runs every architecture check.
                let probe: &[usize] = match kind {
                    ModelKind::Dnn => &[4],
                    ModelKind::Rnn => &[4, 4],
                    ModelKind::Cnn => &[8, 8],
                };
                build_table1(kind, probe, &Table1Options { classes: 2, ..p.net.clone() })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Gmm(GmmClassifier),
    IVector(IVectorModel),
    Neural { kind: ModelKind, segment_frames: usize, net: Net<f32> },
}

/// A fitted model with everything needed to score new clips.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub labels: Vec<String>,
    pub feature_kind: FeatureKind,
    pub dim: usize,
    pub standardizer: Standardizer,
    pub config: ModelConfig,
    pub body: ModelBody,
}

fn softmax(scores: &[f64], scale: f64) -> Vec<f64> {
    let m = scores.iter().map(|s| s * scale).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s * scale - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Non-overlapping `len`-frame windows; a clip shorter than `len` yields one
/// zero-padded window and a trailing remainder is dropped.
fn segments(frames: &Matrix, len: usize) -> Vec<Matrix> {
    let (t, d) = (frames.rows(), frames.cols());
    if t < len {
        let mut data = frames.as_slice().to_vec();
        data.resize(len * d, 0.0);
        return vec![Matrix::from_vec(len, d, data)];
    }
    (0..t / len)
        .map(|s| Matrix::from_vec(len, d, frames.as_slice()[s * len * d..(s + 1) * len * d].to_vec()))
        .collect()
}

fn input_shape(kind: ModelKind, dim: usize, seg: usize) -> Vec<usize> {
    match kind {
        ModelKind::Dnn => vec![dim],
        ModelKind::Rnn => vec![seg, dim],
        ModelKind::Cnn => vec![1, dim, seg],
    }
}

/// Network inputs for one standardized clip.
fn examples(kind: ModelKind, frames: &Matrix, seg: usize) -> (usize, Vec<f32>) {
    match kind {
        ModelKind::Dnn => (frames.rows(), frames.as_slice().iter().map(|&v| v as f32).collect()),
        ModelKind::Rnn => {
            let segs = segments(frames, seg);
            let data = segs.iter().flat_map(|m| m.as_slice().iter().map(|&v| v as f32)).collect();
            (segs.len(), data)
        }
        ModelKind::Cnn => {
            // Bands × frames maps.
            let segs = segments(frames, seg);
            let data = segs
                .iter()
                .flat_map(|m| m.transpose().into_vec().into_iter().map(|v| v as f32))
                .collect();
            (segs.len(), data)
        }
    }
}

fn check_clips(clips: &[(&FeatureSequence, usize)], classes: usize) -> Result<(FeatureKind, usize), PipelineError> {
    let (first, _) = clips.first().ok_or_else(|| PipelineError::Data("no training clips".into()))?;
    let (kind, dim) = (first.kind(), first.dim());
    for (s, c) in clips {
        if s.kind() != kind || s.dim() != dim {
            return Err(PipelineError::Data(format!(
                "mixed features: {kind}/{dim} and {}/{}",
                s.kind(),
                s.dim()
            )));
        }
        if *c >= classes {
            return Err(PipelineError::Data(format!("class {c} out of range for {classes} labels")));
        }
    }
    let mut present = vec![false; classes];
    clips.iter().for_each(|(_, c)| present[*c] = true);
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(PipelineError::Data(format!("no training clips for class '{c}'")));
    }
    Ok((kind, dim))
}

/// Fits the standardizer and model on `clips` (features, class index).
pub fn fit_model(
    clips: &[(&FeatureSequence, usize)],
    labels: &[String],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<TrainedModel, PipelineError> {
    cfg.validate()?;
    let (feature_kind, dim) = check_clips(clips, labels.len())?;
    let seqs: Vec<&FeatureSequence> = clips.iter().map(|(s, _)| *s).collect();
    let standardizer = Standardizer::fit_sequences(&seqs)?;
    let std_clips: Vec<(usize, Matrix)> = clips
        .par_iter()
        .map(|(s, c)| standardizer.apply_sequence(s).map(|m| (*c, m)))
        .collect::<Result<_, _>>()?;

    let body = match cfg {
        ModelConfig::Gmm(p) => {
            let bags: Vec<(String, Matrix)> = labels
                .iter()
                .enumerate()
                .map(|(c, l)| {
                    let parts = std_clips.iter().filter(|(k, _)| *k == c).map(|(_, m)| m);
                    (l.clone(), Matrix::vstack(parts, dim))
                })
                .collect();
            let opts = GmmOptions {
                components: p.components,
                max_iters: p.max_iters,
                tol: p.tol,
                seed,
                ..GmmOptions::default()
            };
            ModelBody::Gmm(train_classifier(&bags, &opts)?)
        }
        ModelConfig::Ivector(p) => {
            let opts = IVectorOptions {
                ubm_components: p.ubm_components,
                ubm_iters: p.ubm_iters,
                rank: p.rank,
                t_iters: p.t_iters,
                scoring: p.scoring,
                length_norm: p.length_norm,
                seed,
            };
            ModelBody::IVector(train_ivector_system(&std_clips, labels.to_vec(), &opts)?)
        }
        _ => {
            let (kind, p) = cfg.neural().unwrap();
            let seg = p.segment_frames;
            let opts = Table1Options {
                classes: labels.len(),
                ..p.net.clone()
            };
            let shape = input_shape(kind, dim, seg);
            let spec = build_table1(kind, &shape, &opts)?;
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (c, m) in &std_clips {
                let (n, data) = examples(kind, m, seg);
                x.extend(data);
                y.extend(std::iter::repeat_n(*c, n));
            }
            let mut full = vec![y.len()];
            full.extend(&shape);
            let data = Dataset::new(Tensor::from_vec(&full, x)?, y)?;
            let net = Net::<f32>::init(spec, derive_seed(seed, 1))?;
            let tc = TrainConfig {
                seed: derive_seed(seed, 2),
                ..p.train.clone()
            };
            let out = train(net, &data, &tc, None)?;
            ModelBody::Neural {
                kind,
                segment_frames: seg,
                net: out.net,
            }
        }
    };
    Ok(TrainedModel {
        labels: labels.to_vec(),
        feature_kind,
        dim,
        standardizer,
        config: cfg.clone(),
        body,
    })
}

impl TrainedModel {
    /// Class probabilities for one clip.
    pub fn predict_clip(&self, seq: &FeatureSequence) -> Result<Vec<f64>, PipelineError> {
        if seq.dim() != self.dim || seq.kind() != self.feature_kind {
            return Err(PipelineError::Data(format!(
                "model expects {}/{} features, clip has {}/{}",
                self.feature_kind,
                self.dim,
                seq.kind(),
                seq.dim()
            )));
        }
        let frames = self.standardizer.apply_sequence(seq)?;
        if frames.rows() == 0 {
            return Err(PipelineError::Data("clip has no frames".into()));
        }
        match &self.body {
            ModelBody::Gmm(clf) => {
                let scores = aggregate_clip(&clf.frame_scores(&frames)?, AggregateMode::SumLog)?;
                Ok(softmax(&scores.scores, 1.0 / frames.rows() as f64))
            }
            ModelBody::IVector(m) => {
                let scores = m.classify_frames(&frames)?;
                let scale = match m.backend.as_ref().map(|b| b.scoring) {
                    Some(Scoring::Euclidean) => 1.0,
                    _ => COSINE_SCALE,
                };
                Ok(softmax(&scores, scale))
            }
            ModelBody::Neural {
                kind,
                segment_frames,
                net,
            } => {
                let (n, data) = examples(*kind, &frames, *segment_frames);
                let mut shape = vec![n];
                shape.extend(input_shape(*kind, self.dim, *segment_frames));
                let p = predict_proba(net, &Tensor::from_vec(&shape, data)?, PREDICT_BATCH)?;
                let c = net.classes();
                let mut rows = Matrix::zeros(n, c);
                for (i, row) in p.data().chunks_exact(c).enumerate() {
                    let z: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    rows.row_mut(i).iter_mut().zip(row).for_each(|(o, &v)| *o = f64::from(v) / z);
                }
                Ok(aggregate_clip(&rows, AggregateMode::MeanProb)?.scores)
            }
        }
    }

    /// Predictions for many clips, keyed by clip id.
    pub fn predict_all(&self, clips: &[(&str, &FeatureSequence)]) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
        clips
            .par_iter()
            .map(|(id, s)| self.predict_clip(s).map(|p| (id.to_string(), p)))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        write_u8(w, self.feature_kind.tag())?;
        write_u32(w, self.dim as u32)?;
        write_u32(w, self.labels.len() as u32)?;
        for l in &self.labels {
            write_str(w, l)?;
        }
        write_f64s(w, &self.standardizer.mean)?;
        write_f64s(w, &self.standardizer.std)?;
        write_len_prefixed(w, &serde_json::to_vec(&self.config).expect("config serializes"))?;
        match &self.body {
            ModelBody::Gmm(clf) => {
                write_u8(w, 1)?;
                let mut buf = Vec::new();
                clf.write_to(&mut buf)?;
                write_len_prefixed(w, &buf)
            }
            ModelBody::IVector(m) => {
                write_u8(w, 2)?;
                write_len_prefixed(w, &m.to_bytes())
            }
            ModelBody::Neural {
                kind,
                segment_frames,
                net,
            } => {
                write_u8(w, 3)?;
                write_u8(w, *kind as u8)?;
                write_u32(w, *segment_frames as u32)?;
                let train = match &self.config {
                    ModelConfig::Dnn(p) | ModelConfig::Rnn(p) | ModelConfig::Cnn(p) => &p.train,
                    _ => unreachable!("neural body with non-neural config"),
                };
                let cfg = serde_json::to_string(train).expect("config serializes");
                write_len_prefixed(w, &encode_net(net, &cfg))
            }
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, PipelineError> {
        let fmt = |e: std::io::Error| PipelineError::Format(e.to_string());
        expect_magic(r, MODEL_MAGIC).map_err(fmt)?;
        let tag = read_u8(r).map_err(fmt)?;
        let feature_kind =
            FeatureKind::from_tag(tag).ok_or_else(|| PipelineError::Format(format!("unknown feature tag {tag}")))?;
        let dim = read_count(r, 1 << 20, "dimension").map_err(fmt)?;
        let c = read_count(r, 1 << 16, "label").map_err(fmt)?;
        let labels = (0..c).map(|_| read_str(r)).collect::<Result<Vec<_>, _>>().map_err(fmt)?;
        let standardizer = Standardizer {
            mean: read_f64s(r, dim).map_err(fmt)?,
            std: read_f64s(r, dim).map_err(fmt)?,
        };
        let config: ModelConfig = serde_json::from_slice(&read_len_prefixed(r).map_err(fmt)?)
            .map_err(|e| PipelineError::Format(format!("config: {e}")))?;
        let body = match read_u8(r).map_err(fmt)? {
            1 => {
                let bytes = read_len_prefixed(r).map_err(fmt)?;
                ModelBody::Gmm(GmmClassifier::read_from(&mut Cursor::new(bytes))?)
            }
            2 => ModelBody::IVector(IVectorModel::from_bytes(&read_len_prefixed(r).map_err(fmt)?)?),
            3 => {
                let kind = match read_u8(r).map_err(fmt)? {
                    0 => ModelKind::Dnn,
                    1 => ModelKind::Rnn,
                    2 => ModelKind::Cnn,
                    v => return Err(PipelineError::Format(format!("unknown network kind {v}"))),
                };
                let segment_frames = read_count(r, 1 << 20, "segment length").map_err(fmt)?;
                let (net, _) = decode_net(&read_len_prefixed(r).map_err(fmt)?)?;
                ModelBody::Neural {
                    kind,
                    segment_frames,
                    net,
                }
            }
            v => return Err(PipelineError::Format(format!("unknown model tag {v}"))),
        };
        Ok(Self {
            labels,
            feature_kind,
            dim,
            standardizer,
            config,
            body,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("write to Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut r = Cursor::new(bytes);
        let m = Self::read_from(&mut r)?;
        if r.position() as usize != bytes.len() {
            return Err(PipelineError::Format("trailing bytes".into()));
        }
        Ok(m)
    }
}

/// Cross-validates `cfg` over `plan`. `features[i]` belongs to manifest
/// entry `i`. Each fold fits on its training clips only and returns the
/// fitted standardizer as the fold artifact.
pub fn cross_validate(
    manifest: &Manifest,
    features: &[FeatureSequence],
    plan: &FoldPlan,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<CvSummary<Standardizer>, PipelineError> {
    cfg.validate()?;
    if features.len() != manifest.len() {
        return Err(PipelineError::Data(format!(
            "{} feature sequences for {} manifest entries",
            features.len(),
            manifest.len()
        )));
    }
    let entries = manifest.entries();
    Ok(cv_run(manifest, plan, seed, |ctx| -> Result<_, PipelineError> {
        let train: Vec<(&FeatureSequence, usize)> = ctx.train.iter().map(|&i| (&features[i], entries[i].class)).collect();
        let model = fit_model(&train, manifest.labels(), cfg, ctx.seed)?;
        let test: Vec<(&str, &FeatureSequence)> =
            ctx.test.iter().map(|&i| (entries[i].path.as_str(), &features[i])).collect();
        Ok((model.predict_all(&test)?, model.standardizer))
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation() {
        let m = Matrix::from_vec(5, 2, (0..10).map(f64::from).collect());
        let s = segments(&m, 2);
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].as_slice(), &[4.0, 5.0, 6.0, 7.0]);
        let short = segments(&m, 8);
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].rows(), 8);
        assert_eq!(short[0].row(7), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_scaling_keeps_argmax() {
        let p = softmax(&[-300.0, -100.0, -200.0], 0.01);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(crate::gmm::argmax(&p), 1);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::Gmm(GmmParams { components: 0, ..GmmParams::default() }).validate().is_err());
        let mut p = NeuralParams::default();
        p.net.dropout = Some(0.9);
        assert!(ModelConfig::Dnn(p).validate().is_err());
        assert!(ModelConfig::Cnn(NeuralParams::default()).validate().is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::Ivector(IVectorParams { rank: 16, ..IVectorParams::default() });
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"kind\":\"ivector\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    }
}
