//! Subcommand implementations. Each takes fully resolved arguments so the
//! binary and the tests drive exactly the same code.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use scenekit::audio::read_wav;
use scenekit::diagnostics::{activation_trace, first_dense_weights, grid_to_csv, savgol_smooth, weight_spectrum, TraceDirection};
use scenekit::dsp::{decode_features, encode_features, extract, FeatureSequence};
use scenekit::eval::{class_accuracy_csv, evaluate, make_folds, FoldPlan, Manifest};
use scenekit::fusion::{fuse, FusionSpec, ModelOutput};
use scenekit::matrix::Matrix;
use scenekit::neural::LayerSpec;
use scenekit::pipeline::{cross_validate, fit_model, ModelBody, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::fsutil::{read, read_text, write_atomic};

pub const DATA_ROOT_ENV: &str = "SCENEKIT_DATA_ROOT";
const EXTRACT_STATE: &str = "extract.json";
const FEATURE_EXT: &str = "skf";

pub fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::parse(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Explicit root, else the environment variable, else the manifest's directory.
pub fn resolve_data_root(explicit: Option<&Path>, manifest: &Path) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(DATA_ROOT_ENV) {
        return PathBuf::from(p);
    }
    manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn relative_clip(path: &str) -> Result<&Path, String> {
    let p = Path::new(path);
    if p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        Ok(p)
    } else {
        Err(format!("clip path '{path}' must be relative without '..'"))
    }
}

/// Location of a clip's feature file inside a feature directory.
pub fn feature_path(dir: &Path, clip: &str) -> Result<PathBuf, CliError> {
    let rel = relative_clip(clip).map_err(CliError::Data)?;
    let mut name = rel.as_os_str().to_os_string();
    name.push(".");
    name.push(FEATURE_EXT);
    Ok(dir.join(name))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct ExtractState {
    feature_hash: String,
    clips: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractSummary {
    pub computed: usize,
    pub skipped: usize,
}

/// Extracts one feature file per manifest clip. Clips whose file exists and
/// was produced under the same feature hash are skipped. Per-clip failures
/// are collected and reported together after all other clips are done.
pub fn cmd_extract(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path, data_root: Option<&Path>) -> Result<ExtractSummary, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let root = resolve_data_root(data_root.or(cfg.paths.data_root.as_deref()), manifest_path);
    let hash = cfg.feature_hash();
    let state_path = out_dir.join(EXTRACT_STATE);
    let mut state: ExtractState = match std::fs::read(&state_path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => ExtractState::default(),
    };
    if state.feature_hash != hash {
        state = ExtractState {
            feature_hash: hash.clone(),
            clips: BTreeMap::new(),
        };
    }

    let results: Vec<(String, Result<bool, String>)> = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let res = (|| -> Result<bool, String> {
                let out = feature_path(out_dir, &e.path).map_err(|e| e.to_string())?;
                if state.clips.get(&e.path) == Some(&hash) && out.is_file() {
                    return Ok(false);
                }
                let clip = read_wav(&root.join(relative_clip(&e.path)?)).map_err(|e| e.to_string())?;
                let seq = extract(&clip, cfg.features.kind, &cfg.features.dsp).map_err(|e| e.to_string())?;
                write_atomic(&out, &encode_features(&seq)).map_err(|e| e.to_string())?;
                Ok(true)
            })();
            (e.path.clone(), res)
        })
        .collect();

    let mut summary = ExtractSummary { computed: 0, skipped: 0 };
    let mut failures = Vec::new();
    for (path, res) in results {
        match res {
            Ok(computed) => {
                if computed {
                    summary.computed += 1;
                } else {
                    summary.skipped += 1;
                }
                state.clips.insert(path, hash.clone());
            }
            Err(msg) => {
                state.clips.remove(&path);
                failures.push(format!("  {path}: {msg}"));
            }
        }
    }
    write_atomic(&state_path, &serde_json::to_vec_pretty(&state).expect("state serializes"))?;
    if !failures.is_empty() {
        return Err(CliError::Partial {
            failed: failures.len(),
            total: manifest.len(),
            details: failures.join("\n"),
        });
    }
    Ok(summary)
}

/// Feature sequences aligned with the manifest entries.
pub fn load_features(manifest: &Manifest, dir: &Path) -> Result<Vec<FeatureSequence>, CliError> {
    let loaded: Vec<Result<FeatureSequence, String>> = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let p = feature_path(dir, &e.path).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(&p).map_err(|err| format!("{}: {err}", p.display()))?;
            decode_features(&bytes).map_err(|err| format!("{}: {err}", p.display()))
        })
        .collect();
    let mut out = Vec::with_capacity(loaded.len());
    let mut errors = Vec::new();
    for r in loaded {
        match r {
            Ok(s) => out.push(s),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Data(format!("cannot load features:\n  {}", errors.join("\n  "))));
    }
    Ok(out)
}

/// Cross-validation results stored next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub model_id: String,
    pub model: String,
    pub config_hash: String,
    pub fold_accuracy: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Sidecar paths for a model file `dir/name.skp`.
pub struct ModelArtifacts {
    pub model: PathBuf,
    pub cv: PathBuf,
    pub oof: PathBuf,
    pub report: PathBuf,
}

impl ModelArtifacts {
    pub fn new(model: &Path) -> Self {
        Self {
            model: model.to_path_buf(),
            cv: model.with_extension("cv.json"),
            oof: model.with_extension("oof.csv"),
            report: model.with_extension("report.txt"),
        }
    }

    pub fn model_id(&self) -> String {
        self.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    }
}

pub fn fold_plan(cfg: &RunConfig, manifest: &Manifest) -> Result<FoldPlan, CliError> {
    match &cfg.folds.file {
        Some(p) => FoldPlan::parse(&read_text(p)?, manifest).map_err(CliError::data),
        None => make_folds(manifest, cfg.folds.k, cfg.fold_seed()).map_err(CliError::data),
    }
}

/// Cross-validates the configured model, then fits the final model on every
/// clip. Writes the model, its out-of-fold predictions, a CV record and a
/// text report.
pub fn cmd_train(cfg: &RunConfig, manifest_path: &Path, feature_dir: &Path, model_out: &Path) -> Result<CvRecord, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path)?;
    let plan = fold_plan(cfg, &manifest)?;
    let features = load_features(&manifest, feature_dir)?;
    let art = ModelArtifacts::new(model_out);

    let cv = cross_validate(&manifest, &features, &plan, &cfg.model, cfg.seed).map_err(CliError::data)?;
    let oof = cv.predictions();
    let record = CvRecord {
        model_id: art.model_id(),
        model: cfg.model.name().into(),
        config_hash: cfg.hash(),
        fold_accuracy: cv.folds.iter().map(|f| f.report.accuracy).collect(),
        mean: cv.mean,
        min: cv.min,
        max: cv.max,
    };

    let all: Vec<(&FeatureSequence, usize)> =
        features.iter().zip(manifest.entries()).map(|(s, e)| (s, e.class)).collect();
    let model = fit_model(&all, manifest.labels(), &cfg.model, cfg.seed).map_err(CliError::data)?;

    let out = ModelOutput::new(record.model_id.clone(), Some(record.mean), manifest.labels().to_vec(), oof.clone())
        .map_err(CliError::data)?;
    let report = evaluate(&oof, &manifest).map_err(CliError::data)?;
    let mut text = format!(
        "model {} ({})\nfolds {}: {}\nmean {:.4}  min {:.4}  max {:.4}\n\n",
        record.model_id,
        record.model,
        plan.k(),
        record.fold_accuracy.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" "),
        record.mean,
        record.min,
        record.max
    );
    text.push_str(&report.to_table());

    write_atomic(&art.model, &model.to_bytes())?;
    write_atomic(&art.oof, out.to_csv().map_err(CliError::data)?.as_bytes())?;
    write_atomic(&art.cv, &serde_json::to_vec_pretty(&record).expect("record serializes"))?;
    write_atomic(&art.report, text.as_bytes())?;
    Ok(record)
}

pub fn load_model(path: &Path) -> Result<TrainedModel, CliError> {
    TrainedModel::from_bytes(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Scores every manifest clip and writes the prediction interchange file.
/// `cv_accuracy` defaults to the mean recorded by training, if present.
pub fn cmd_predict(
    model_path: &Path,
    manifest_path: &Path,
    feature_dir: &Path,
    out: &Path,
    cv_accuracy: Option<f64>,
) -> Result<ModelOutput, CliError> {
    let model = load_model(model_path)?;
    let manifest = load_manifest(manifest_path)?;
    let features = load_features(&manifest, feature_dir)?;
    let art = ModelArtifacts::new(model_path);
    let accuracy = match cv_accuracy {
        Some(a) => Some(a),
        None => std::fs::read(&art.cv)
            .ok()
            .and_then(|b| serde_json::from_slice::<CvRecord>(&b).ok())
            .map(|r| r.mean),
    };
    let clips: Vec<(&str, &FeatureSequence)> =
        manifest.entries().iter().zip(&features).map(|(e, s)| (e.path.as_str(), s)).collect();
    let probs = model.predict_all(&clips).map_err(CliError::data)?;
    let output = ModelOutput::new(art.model_id(), accuracy, model.labels.clone(), probs).map_err(CliError::data)?;
    write_atomic(out, output.to_csv().map_err(CliError::data)?.as_bytes())?;
    Ok(output)
}

pub fn load_predictions(path: &Path) -> Result<ModelOutput, CliError> {
    ModelOutput::from_csv(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_fuse(inputs: &[PathBuf], spec: &FusionSpec, out: &Path) -> Result<ModelOutput, CliError> {
    spec.validate().map_err(CliError::config)?;
    let outputs = inputs.iter().map(|p| load_predictions(p)).collect::<Result<Vec<_>, _>>()?;
    let fused = fuse(&outputs, spec).map_err(CliError::data)?;
    write_atomic(out, fused.to_csv().map_err(CliError::data)?.as_bytes())?;
    Ok(fused)
}

/// Returns the text table; also writes the class-wise CSV when `csv_out` is set.
pub fn cmd_report(predictions: &[PathBuf], manifest_path: &Path, csv_out: Option<&Path>) -> Result<String, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let mut reports = Vec::new();
    let mut text = String::new();
    for p in predictions {
        let out = load_predictions(p)?;
        if out.labels != manifest.labels() {
            return Err(CliError::Data(format!(
                "{}: labels {:?} differ from manifest labels {:?}",
                p.display(),
                out.labels,
                manifest.labels()
            )));
        }
        let report = evaluate(&out.probs, &manifest).map_err(CliError::data)?;
        text.push_str(&format!("== {} ==\n{}\n", out.model_id, report.to_table()));
        reports.push((out.model_id, report));
    }
    if let Some(path) = csv_out {
        let refs: Vec<(&str, &scenekit::eval::EvalReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
        write_atomic(path, class_accuracy_csv(&refs).map_err(CliError::data)?.as_bytes())?;
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Analysis {
    /// Spectra of the first dense layer, optionally smoothed with
    /// Savitzky-Golay `(window, order)`.
    WeightFft { smooth: Option<(usize, usize)> },
    /// Hidden states of a recurrent layer over the first segment of a clip.
    Activation {
        features: PathBuf,
        layer: Option<usize>,
        direction: TraceDirection,
    },
}

/// Writes the analysis grid as CSV and returns its shape.
pub fn cmd_inspect(model_path: &Path, analysis: &Analysis, out: &Path) -> Result<(usize, usize), CliError> {
    let model = load_model(model_path)?;
    let ModelBody::Neural { net, segment_frames, .. } = &model.body else {
        return Err(CliError::Data("inspect needs a neural model".into()));
    };
    let grid = match analysis {
        Analysis::WeightFft { smooth } => {
            let w = first_dense_weights(net).map_err(CliError::data)?;
            let mut s = weight_spectrum(&w).map_err(CliError::data)?;
            if let Some((window, order)) = *smooth {
                for r in 0..s.rows() {
                    let row = savgol_smooth(s.row(r), window, order).map_err(CliError::data)?;
                    s.row_mut(r).copy_from_slice(&row);
                }
            }
            s
        }
        Analysis::Activation {
            features,
            layer,
            direction,
        } => {
            let seq = decode_features(&read(features)?).map_err(CliError::data)?;
            let frames = model.standardizer.apply_sequence(&seq).map_err(CliError::data)?;
            let n = frames.rows().min(*segment_frames);
            let frames = Matrix::from_vec(n, frames.cols(), frames.as_slice()[..n * frames.cols()].to_vec());
            let layer = match layer {
                Some(l) => *l,
                None => net
                    .spec()
                    .layers
                    .iter()
                    .position(|l| matches!(l, LayerSpec::Gru { .. } | LayerSpec::Bidirectional { .. }))
                    .ok_or_else(|| CliError::Data("model has no recurrent layer".into()))?,
            };
            activation_trace(net, layer, *direction, &frames).map_err(CliError::data)?
        }
    };
    write_atomic(out, grid_to_csv(&grid).as_bytes())?;
    Ok((grid.rows(), grid.cols()))
}

pub fn cmd_folds(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<FoldPlan, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let plan = fold_plan(cfg, &manifest)?;
    write_atomic(out, plan.to_tsv(&manifest).as_bytes())?;
    Ok(plan)
}
