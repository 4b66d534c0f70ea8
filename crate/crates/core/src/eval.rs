//! Manifests, stratified folds, clip-level aggregation and accuracy reports.
//!
//! Class order is always the alphabetical order of the manifest labels, and
//! every argmax breaks ties toward the lowest class index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::error::Error as StdError;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{argmax, derive_seed};
use crate::matrix::Matrix;

const ROW_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate clip '{path}' on line {line}")]
    DuplicatePath { path: String, line: usize },
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("class '{label}' has {count} clips, fewer than {k} folds")]
    ClassTooSmall { label: String, count: usize, k: usize },
    #[error("fold count must be >= 2, got {0}")]
    BadFoldCount(usize),
    #[error("fold plan does not match manifest: {0}")]
    PlanMismatch(String),
    #[error("no segments to aggregate")]
    EmptySegments,
    #[error("segment {row} is not a probability distribution")]
    NotDistribution { row: usize },
    #[error("missing predictions for {} clip(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("clip '{clip}' has {got} scores for {expected} classes")]
    ScoreWidth { clip: String, expected: usize, got: usize },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        source: Box<dyn StdError + Send + Sync>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    /// Index into [`Manifest::labels`].
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    labels: Vec<String>,
}

impl Manifest {
    /// Builds a manifest from `(path, label)` pairs in order.
    pub fn from_pairs<I, P, L>(pairs: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (P, L)>,
        P: Into<String>,
        L: Into<String>,
    {
        let raw: Vec<(usize, String, String)> = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (p, l))| (i + 1, p.into(), l.into()))
            .collect();
        Self::build(raw)
    }

    fn build(raw: Vec<(usize, String, String)>) -> Result<Self, EvalError> {
        if raw.is_empty() {
            return Err(EvalError::EmptyManifest);
        }
        let mut seen = BTreeSet::new();
        for (line, p, _) in &raw {
            if !seen.insert(p.as_str()) {
                return Err(EvalError::DuplicatePath {
                    path: p.clone(),
                    line: *line,
                });
            }
        }
        let labels: Vec<String> = raw
            .iter()
            .map(|(_, _, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let entries = raw
            .into_iter()
            .map(|(_, path, label)| {
                let class = labels.binary_search(&label).unwrap();
                ManifestEntry { path, label, class }
            })
            .collect();
        Ok(Self { entries, labels })
    }

    /// Parses `path<TAB>label` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut raw = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let path = fields.next().unwrap_or("").trim();
            let label = fields.next().map(str::trim).unwrap_or("");
            if path.is_empty() || label.is_empty() {
                return Err(EvalError::Parse {
                    line: line_no,
                    msg: "expected 'path<TAB>label'".into(),
                });
            }
            if fields.next().is_some() {
                return Err(EvalError::Parse {
                    line: line_no,
                    msg: "too many columns".into(),
                });
            }
            raw.push((line_no, path.to_string(), label.to_string()));
        }
        Self::build(raw)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.path, e.label)).collect()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for e in &self.entries {
            counts[e.class] += 1;
        }
        counts
    }
}

/// Fold index per manifest entry, aligned with [`Manifest::entries`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    folds: Vec<usize>,
}

impl FoldPlan {
    pub fn new(k: usize, folds: Vec<usize>) -> Result<Self, EvalError> {
        if k < 2 {
            return Err(EvalError::BadFoldCount(k));
        }
        if let Some(f) = folds.iter().find(|&&f| f >= k) {
            return Err(EvalError::PlanMismatch(format!("fold {f} out of range for k={k}")));
        }
        for f in 0..k {
            if !folds.contains(&f) {
                return Err(EvalError::PlanMismatch(format!("fold {f} is empty")));
            }
        }
        Ok(Self { k, folds })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    /// Manifest indices held out in `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    /// Manifest indices used for training when `fold` is held out.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn assignment<'a>(&self, manifest: &'a Manifest) -> BTreeMap<&'a str, usize> {
        manifest.entries.iter().zip(&self.folds).map(|(e, &f)| (e.path.as_str(), f)).collect()
    }

    /// `path<TAB>fold` lines in manifest order.
    pub fn to_tsv(&self, manifest: &Manifest) -> String {
        manifest
            .entries
            .iter()
            .zip(&self.folds)
            .map(|(e, f)| format!("{}\t{f}\n", e.path))
            .collect()
    }

    /// Parses an externally supplied fold file (`path<TAB>fold`); it must
    /// assign every manifest clip exactly once.
    pub fn parse(text: &str, manifest: &Manifest) -> Result<Self, EvalError> {
        let index: HashMap<&str, usize> =
            manifest.entries.iter().enumerate().map(|(i, e)| (e.path.as_str(), i)).collect();
        let mut folds = vec![usize::MAX; manifest.len()];
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: &str| EvalError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let (path, fold) = line.split_once('\t').ok_or_else(|| perr("expected 'path<TAB>fold'"))?;
            let fold: usize = fold.trim().parse().map_err(|_| perr("fold is not an integer"))?;
            let &idx = index
                .get(path.trim())
                .ok_or_else(|| perr(&format!("clip '{}' not in manifest", path.trim())))?;
            if folds[idx] != usize::MAX {
                return Err(EvalError::DuplicatePath {
                    path: path.trim().to_string(),
                    line: line_no,
                });
            }
            folds[idx] = fold;
        }
        let missing: Vec<&str> = folds
            .iter()
            .zip(&manifest.entries)
            .filter(|(f, _)| **f == usize::MAX)
            .map(|(_, e)| e.path.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::PlanMismatch(format!("no fold for {}", missing.join(", "))));
        }
        let k = folds.iter().max().unwrap() + 1;
        Self::new(k, folds)
    }
}

/// Seeded stratified assignment: each class is shuffled and dealt round
/// robin, continuing where the previous class stopped so fold sizes stay
/// balanced overall.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    let counts = manifest.class_counts();
    for (label, &count) in manifest.labels.iter().zip(&counts) {
        if count < k {
            return Err(EvalError::ClassTooSmall {
                label: label.clone(),
                count,
                k,
            });
        }
    }
    let mut folds = vec![0; manifest.len()];
    let mut offset = 0;
    for c in 0..manifest.labels.len() {
        let mut members: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.entries[i].class == c).collect();
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64)));
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    FoldPlan::new(k, folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Sum of per-segment log scores.
    SumLog,
    /// Mean of per-segment probability rows.
    MeanProb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipScore {
    pub mode: AggregateMode,
    pub scores: Vec<f64>,
}

/// Collapses S×C segment scores into one clip score.
pub fn aggregate_clip(segment_scores: &Matrix, mode: AggregateMode) -> Result<ClipScore, EvalError> {
    let s = segment_scores.rows();
    if s == 0 {
        return Err(EvalError::EmptySegments);
    }
    let mut scores = vec![0.0; segment_scores.cols()];
    for (r, row) in segment_scores.row_iter().enumerate() {
        if mode == AggregateMode::MeanProb {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(EvalError::NotDistribution { row: r });
            }
        }
        scores.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    if mode == AggregateMode::MeanProb {
        scores.iter_mut().for_each(|v| *v /= s as f64);
    }
    Ok(ClipScore { mode, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub accuracy: f64,
    /// Per-class recall, in label order.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]` clip counts.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl EvalReport {
    pub fn correct(&self) -> usize {
        (0..self.labels.len()).map(|c| self.confusion[c][c]).sum()
    }

    pub fn class_accuracy(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.per_class[i])
    }

    /// Fixed-width table: per-class accuracy then the confusion matrix.
    pub fn to_table(&self) -> String {
        let w = self.labels.iter().map(|l| l.len()).max().unwrap_or(5).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>8}  {:>6}", "class", "accuracy", "clips");
        for (c, label) in self.labels.iter().enumerate() {
            let n: usize = self.confusion[c].iter().sum();
            let _ = writeln!(s, "{label:<w$}  {:>7.1}%  {n:>6}", 100.0 * self.per_class[c]);
        }
        let _ = writeln!(s, "{:<w$}  {:>7.1}%  {:>6}", "overall", 100.0 * self.accuracy, self.total);
        let _ = writeln!(s, "\nconfusion (rows = true, columns = predicted)");
        for (c, label) in self.labels.iter().enumerate() {
            let _ = write!(s, "{label:<w$}");
            for v in &self.confusion[c] {
                let _ = write!(s, " {v:>4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Scores every manifest clip by the argmax of its prediction row.
pub fn evaluate(predictions: &BTreeMap<String, Vec<f64>>, truth: &Manifest) -> Result<EvalReport, EvalError> {
    evaluate_subset(predictions, truth, &(0..truth.len()).collect::<Vec<_>>())
}

/// [`evaluate`] restricted to the given manifest indices.
pub fn evaluate_subset(
    predictions: &BTreeMap<String, Vec<f64>>,
    truth: &Manifest,
    indices: &[usize],
) -> Result<EvalReport, EvalError> {
    let c = truth.labels.len();
    let missing: Vec<String> = indices
        .iter()
        .map(|&i| &truth.entries[i].path)
        .filter(|p| !predictions.contains_key(*p))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for &i in indices {
        let e = &truth.entries[i];
        let row = &predictions[&e.path];
        if row.len() != c {
            return Err(EvalError::ScoreWidth {
                clip: e.path.clone(),
                expected: c,
                got: row.len(),
            });
        }
        confusion[e.class][argmax(row)] += 1;
    }
    let total = indices.len();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class = (0..c)
        .map(|k| {
            let n: usize = confusion[k].iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                confusion[k][k] as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalReport {
        labels: truth.labels.clone(),
        accuracy: if total == 0 { f64::NAN } else { correct as f64 / total as f64 },
        per_class,
        confusion,
        total,
    })
}

/// What a fold's fit-and-predict callback receives.
#[derive(Debug, Clone)]
pub struct FoldContext {
    pub fold: usize,
    /// Master seed mixed with the fold index.
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FoldResult<A> {
    pub fold: usize,
    pub report: EvalReport,
    /// Held-out clip predictions.
    pub predictions: BTreeMap<String, Vec<f64>>,
    /// Whatever else the callback returned (e.g. the fitted standardizer).
    pub artifact: A,
}

#[derive(Debug, Clone)]
pub struct CvSummary<A> {
    pub folds: Vec<FoldResult<A>>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl<A> CvSummary<A> {
    /// Out-of-fold predictions for every clip.
    pub fn predictions(&self) -> BTreeMap<String, Vec<f64>> {
        self.folds.iter().flat_map(|f| f.predictions.clone()).collect()
    }
}

/// Runs every fold in parallel. The callback must fit only on
/// `ctx.train` and return predictions for (at least) `ctx.test`; results
/// are merged by fold index.
pub fn cv_run<A, F, E>(manifest: &Manifest, plan: &FoldPlan, seed: u64, fit_predict: F) -> Result<CvSummary<A>, EvalError>
where
    A: Send,
    F: Fn(&FoldContext) -> Result<(BTreeMap<String, Vec<f64>>, A), E> + Sync,
    E: Into<Box<dyn StdError + Send + Sync>>,
{
    if plan.folds.len() != manifest.len() {
        return Err(EvalError::PlanMismatch(format!(
            "plan covers {} clips, manifest has {}",
            plan.folds.len(),
            manifest.len()
        )));
    }
    let folds = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let ctx = FoldContext {
                fold,
                seed: derive_seed(seed, fold as u64),
                train: plan.train_indices(fold),
                test: plan.test_indices(fold),
            };
            let (mut predictions, artifact) =
                fit_predict(&ctx).map_err(|e| EvalError::Fold { fold, source: e.into() })?;
            let keep: BTreeSet<&str> = ctx.test.iter().map(|&i| manifest.entries[i].path.as_str()).collect();
            predictions.retain(|k, _| keep.contains(k.as_str()));
            let report = evaluate_subset(&predictions, manifest, &ctx.test)?;
            Ok(FoldResult {
                fold,
                report,
                predictions,
                artifact,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let accs: Vec<f64> = folds.iter().map(|f| f.report.accuracy).collect();
    Ok(CvSummary {
        mean: accs.iter().sum::<f64>() / accs.len() as f64,
        min: accs.iter().copied().fold(f64::INFINITY, f64::min),
        max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        folds,
    })
}

/// Class-wise accuracy table in percent: one row per class, one column per
/// model, plus a closing `mean` row with overall accuracy.
pub fn class_accuracy_csv(models: &[(&str, &EvalReport)]) -> Result<String, EvalError> {
    let Some((_, first)) = models.first() else {
        return Ok(String::from("class\n"));
    };
    if let Some((name, _)) = models.iter().find(|(_, r)| r.labels != first.labels) {
        return Err(EvalError::PlanMismatch(format!("model '{name}' uses a different label set")));
    }
    let mut s = String::from("class");
    for (name, _) in models {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (c, label) in first.labels.iter().enumerate() {
        s.push_str(label);
        for (_, r) in models {
            let _ = write!(s, ",{:.1}", 100.0 * r.per_class[c]);
        }
        s.push('\n');
    }
    s.push_str("mean");
    for (_, r) in models {
        let _ = write!(s, ",{:.1}", 100.0 * r.accuracy);
    }
    s.push('\n');
    Ok(s)
}
