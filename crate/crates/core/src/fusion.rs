//! Late fusion of per-clip class probabilities from several models.
//!
//! Interchange format (UTF-8 text):
//!
//! ```text
//! # model_id=<id> cv_accuracy=<fraction>
//! clip_id,<label_1>,...,<label_C>
//! <clip>,<p_1>,...,<p_C>
//! ```
//!
//! `cv_accuracy` is omitted when unknown. Values use the shortest decimal
//! form that round-trips, so files round-trip bit-exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::derive_seed;

const ROW_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no model reaches accuracy threshold {threshold} (best {best:?})")]
    NoModelPassed { threshold: f64, best: Option<f64> },
    #[error("model '{model_id}' does not cover the same clips as '{reference}'")]
    ClipSetMismatch { model_id: String, reference: String },
    #[error("model '{0}' has a different label list")]
    LabelMismatch(String),
    #[error("weights must be finite, non-negative, one per model, with at least one positive")]
    InvalidWeights,
    #[error("invalid fusion spec: {0}")]
    InvalidSpec(String),
    #[error("clip '{clip}': {reason}")]
    InvalidRow { clip: String, reason: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no model outputs given")]
    Empty,
}

/// Class probabilities of one model for a set of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub model_id: String,
    pub cv_accuracy: Option<f64>,
    pub labels: Vec<String>,
    pub probs: BTreeMap<String, Vec<f64>>,
}

impl ModelOutput {
    /// Validates that every row is a distribution over `labels`.
    pub fn new(
        model_id: impl Into<String>,
        cv_accuracy: Option<f64>,
        labels: Vec<String>,
        probs: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, FusionError> {
        if let Some(a) = cv_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(FusionError::InvalidSpec(format!("cv_accuracy {a} outside [0, 1]")));
            }
        }
        for (clip, row) in &probs {
            check_row(clip, row, labels.len())?;
        }
        Ok(Self {
            model_id: model_id.into(),
            cv_accuracy,
            labels,
            probs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Predicted label index per clip; ties go to the lowest index.
    pub fn predictions(&self) -> BTreeMap<String, usize> {
        self.probs
            .iter()
            .map(|(c, row)| (c.clone(), crate::gmm::argmax(row)))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String, FusionError> {
        let mut s = format!("# model_id={}", self.model_id);
        if let Some(a) = self.cv_accuracy {
            s.push_str(&format!(" cv_accuracy={a}"));
        }
        s.push('\n');
        s.push_str("clip_id");
        for l in &self.labels {
            if l.contains([',', '\n', '\r']) {
                return Err(FusionError::InvalidSpec(format!("label '{l}' contains a delimiter")));
            }
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (clip, row) in &self.probs {
            if clip.contains([',', '\n', '\r']) {
                return Err(FusionError::InvalidRow {
                    clip: clip.clone(),
                    reason: "clip id contains a delimiter".into(),
                });
            }
            s.push_str(clip);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self, FusionError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let perr = |line: usize, msg: &str| FusionError::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let (ln, header) = lines.next().ok_or_else(|| perr(0, "empty file"))?;
        let meta = header
            .strip_prefix('#')
            .ok_or_else(|| perr(ln, "expected '# model_id=...' comment line"))?;
        let mut model_id = None;
        let mut cv_accuracy = None;
        for tok in meta.split_whitespace() {
            match tok.split_once('=') {
                Some(("model_id", v)) => model_id = Some(v.to_string()),
                Some(("cv_accuracy", v)) => {
                    cv_accuracy = Some(v.parse::<f64>().map_err(|_| perr(ln, "bad cv_accuracy"))?);
                }
                _ => return Err(perr(ln, &format!("unknown header token '{tok}'"))),
            }
        }
        let model_id = model_id.ok_or_else(|| perr(ln, "missing model_id"))?;
        let (ln, cols) = lines.next().ok_or_else(|| perr(ln + 1, "missing column header"))?;
        let mut cols = cols.split(',');
        if cols.next() != Some("clip_id") {
            return Err(perr(ln, "first column must be clip_id"));
        }
        let labels: Vec<String> = cols.map(str::to_string).collect();
        if labels.is_empty() {
            return Err(perr(ln, "no label columns"));
        }
        let mut probs = BTreeMap::new();
        for (ln, line) in lines {
            let mut fields = line.split(',');
            let clip = fields.next().unwrap().to_string();
            let row = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| perr(ln, &format!("bad probability: {e}")))?;
            if row.len() != labels.len() {
                return Err(perr(ln, &format!("expected {} values, got {}", labels.len(), row.len())));
            }
            if probs.insert(clip.clone(), row).is_some() {
                return Err(perr(ln, &format!("duplicate clip '{clip}'")));
            }
        }
        Self::new(model_id, cv_accuracy, labels, probs)
    }
}

fn check_row(clip: &str, row: &[f64], classes: usize) -> Result<(), FusionError> {
    let bad = |reason: String| FusionError::InvalidRow {
        clip: clip.to_string(),
        reason,
    };
    if row.len() != classes {
        return Err(bad(format!("{} values for {classes} classes", row.len())));
    }
    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(bad("negative or non-finite probability".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(bad(format!("row sums to {sum}")));
    }
    Ok(())
}

/// Keeps outputs whose accuracy reaches `threshold`, ordered by accuracy
/// (highest first, stable for ties). Outputs without an accuracy pass only
/// a zero threshold.
pub fn gate_models(outputs: &[ModelOutput], threshold: f64) -> Result<Vec<ModelOutput>, FusionError> {
    let mut ranked: Vec<&ModelOutput> = outputs.iter().collect();
    let acc = |m: &ModelOutput| m.cv_accuracy.unwrap_or(0.0);
    ranked.sort_by(|a, b| acc(b).total_cmp(&acc(a)));
    let kept: Vec<ModelOutput> = ranked
        .iter()
        .filter(|m| acc(m) >= threshold)
        .map(|m| (*m).clone())
        .collect();
    if kept.is_empty() {
        return Err(FusionError::NoModelPassed {
            threshold,
            best: outputs.iter().filter_map(|m| m.cv_accuracy).reduce(f64::max),
        });
    }
    Ok(kept)
}

/// `sum_i w_i p_i` per clip with weights normalised to sum to one.
pub fn weighted_average(outputs: &[ModelOutput], weights: &[f64]) -> Result<BTreeMap<String, Vec<f64>>, FusionError> {
    let first = outputs.first().ok_or(FusionError::Empty)?;
    if weights.len() != outputs.len() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(FusionError::InvalidWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(FusionError::InvalidWeights);
    }
    for m in &outputs[1..] {
        if m.labels != first.labels {
            return Err(FusionError::LabelMismatch(m.model_id.clone()));
        }
        if m.probs.len() != first.probs.len() || !m.probs.keys().eq(first.probs.keys()) {
            return Err(FusionError::ClipSetMismatch {
                model_id: m.model_id.clone(),
                reference: first.model_id.clone(),
            });
        }
    }
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut fused = BTreeMap::new();
    for clip in first.probs.keys() {
        let mut row = vec![0.0; first.num_classes()];
        for (m, &w) in outputs.iter().zip(&norm) {
            if w == 0.0 {
                continue;
            }
            for (r, p) in row.iter_mut().zip(&m.probs[clip]) {
                *r += w * p;
            }
        }
        fused.insert(clip.clone(), row);
    }
    Ok(fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Uniform,
    /// Weights proportional to each model's cross-validation accuracy.
    AccuracyProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSpec {
    pub threshold: f64,
    pub weight_mode: WeightMode,
    /// Bagging rounds over the gated models.
    pub bag_count: usize,
    /// Fraction of gated models drawn (without replacement) per round.
    pub bag_fraction: f64,
    pub seed: u64,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            weight_mode: WeightMode::Uniform,
            bag_count: 1,
            bag_fraction: 1.0,
            seed: 0,
        }
    }
}

impl FusionSpec {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(FusionError::InvalidSpec("threshold must be in [0, 1]".into()));
        }
        if !(self.bag_fraction > 0.0 && self.bag_fraction <= 1.0) {
            return Err(FusionError::InvalidSpec("bag_fraction must be in (0, 1]".into()));
        }
        if self.bag_count == 0 {
            return Err(FusionError::InvalidSpec("bag_count must be >= 1".into()));
        }
        Ok(())
    }
}

fn weights_for(models: &[ModelOutput], mode: WeightMode) -> Vec<f64> {
    match mode {
        WeightMode::Uniform => vec![1.0; models.len()],
        WeightMode::AccuracyProportional => models.iter().map(|m| m.cv_accuracy.unwrap_or(0.0)).collect(),
    }
}

/// Gate, then average `bag_count` weighted averages over seeded random
/// subsets of the gated models.
pub fn fuse(outputs: &[ModelOutput], spec: &FusionSpec) -> Result<ModelOutput, FusionError> {
    spec.validate()?;
    let gated = gate_models(outputs, spec.threshold)?;
    let m = gated.len();
    let draw = ((spec.bag_fraction * m as f64).ceil() as usize).clamp(1, m);
    let rounds: Vec<BTreeMap<String, Vec<f64>>> = (0..spec.bag_count)
        .map(|r| {
            let subset: Vec<ModelOutput> = if draw == m {
                gated.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, r as u64));
                let mut idx = rand::seq::index::sample(&mut rng, m, draw).into_vec();
                idx.sort_unstable();
                idx.iter().map(|&i| gated[i].clone()).collect()
            };
            weighted_average(&subset, &weights_for(&subset, spec.weight_mode))
        })
        .collect::<Result<_, _>>()?;

    let probs = if rounds.len() == 1 {
        rounds.into_iter().next().unwrap()
    } else {
        let n = rounds.len() as f64;
        let mut acc = rounds[0].clone();
        for round in &rounds[1..] {
            for (clip, row) in acc.iter_mut() {
                row.iter_mut().zip(&round[clip]).for_each(|(a, b)| *a += b);
            }
        }
        acc.values_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= n));
        acc
    };
    ModelOutput::new(
        format!("fusion[{}]", gated.iter().map(|g| g.model_id.as_str()).collect::<Vec<_>>().join("+")),
        None,
        gated[0].labels.clone(),
        probs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(id: &str, acc: f64, rows: &[(&str, [f64; 3])]) -> ModelOutput {
        ModelOutput::new(
            id,
            Some(acc),
            vec!["a".into(), "b".into(), "c".into()],
            rows.iter().map(|(c, r)| (c.to_string(), r.to_vec())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gate_examples() {
        let rows = [("x", [1.0, 0.0, 0.0])];
        let ms = vec![out("m1", 0.72, &rows), out("m2", 0.84, &rows), out("m3", 0.80, &rows)];
        let kept = gate_models(&ms, 0.75).unwrap();
        assert_eq!(kept.iter().map(|m| m.model_id.as_str()).collect::<Vec<_>>(), ["m2", "m3"]);
        assert_eq!(gate_models(&ms, 0.0).unwrap().len(), 3);
        assert!(matches!(gate_models(&ms, 0.9), Err(FusionError::NoModelPassed { .. })));
    }

    #[test]
    fn weighted_average_examples() {
        let a = out("a", 0.5, &[("x", [1.0, 0.0, 0.0])]);
        let b = out("b", 0.5, &[("x", [0.0, 1.0, 0.0])]);
        let both = [a.clone(), b.clone()];
        assert_eq!(weighted_average(&both, &[0.5, 0.5]).unwrap()["x"], vec![0.5, 0.5, 0.0]);
        assert_eq!(weighted_average(&both, &[1.0, 0.0]).unwrap()["x"], a.probs["x"]);
        assert_eq!(weighted_average(&both, &[0.0, 0.0]), Err(FusionError::InvalidWeights));
        let c = out("c", 0.5, &[("y", [0.0, 1.0, 0.0])]);
        assert!(matches!(weighted_average(&[a, c], &[1.0, 1.0]), Err(FusionError::ClipSetMismatch { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let m = ModelOutput::new(
            "gmm_mfcc",
            Some(0.725),
            vec!["beach".into(), "bus".into()],
            [("a.wav".to_string(), vec![0.1, 0.9]), ("b.wav".to_string(), vec![1.0 / 3.0, 2.0 / 3.0])]
                .into_iter()
                .collect(),
        )
        .unwrap();
        let text = m.to_csv().unwrap();
        assert!(text.starts_with("# model_id=gmm_mfcc cv_accuracy=0.725\nclip_id,beach,bus\n"));
        let back = ModelOutput::from_csv(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_csv().unwrap(), text);
    }

    #[test]
    fn rejects_bad_rows() {
        let text = "# model_id=m\nclip_id,a,b\nx,0.5,0.6\n";
        assert!(matches!(ModelOutput::from_csv(text), Err(FusionError::InvalidRow { .. })));
        let text = "# model_id=m\nclip_id,a,b\nx,0.5\n";
        assert!(matches!(ModelOutput::from_csv(text), Err(FusionError::Parse { line: 3, .. })));
    }
}
