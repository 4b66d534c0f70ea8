//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [features]
//! kind = "mfcc61"          # mfcc61 | bimfcc183 | logmel60 | logmel200 | func983like | func6klike
//! [features.dsp]
//! win_len = 0.02
//! hop = 0.01
//!
//! [model]
//! kind = "dnn"             # gmm | ivector | dnn | rnn | cnn
//! [model.net]
//! dnn_units = 64
//! dropout = 0.2
//! [model.train]
//! epochs = 10
//! optimizer = { kind = "adam", lr = 0.001, beta1 = 0.9, beta2 = 0.999, eps = 1e-7 }
//!
//! [folds]
//! k = 4
//!
//! [fusion]
//! threshold = 0.0
//! weight_mode = "uniform"  # uniform | accuracy_proportional
//! ```
//!
//! Any key can be overridden from the command line with
//! `--set section.key=value`; the value is parsed as a TOML literal and
//! falls back to a plain string.

use std::path::PathBuf;

use scenekit::dsp::{DspConfig, FeatureKind};
use scenekit::fusion::FusionSpec;
use scenekit::pipeline::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub kind: FeatureKind,
    pub dsp: DspConfig,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Mfcc61,
            dsp: DspConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSection {
    pub k: usize,
    /// Fold seed; the run seed when absent.
    pub seed: Option<u64>,
    /// Externally defined folds (`path<TAB>fold`), overriding `k`.
    pub file: Option<PathBuf>,
}

impl Default for FoldSection {
    fn default() -> Self {
        Self { k: 4, seed: None, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    /// Root for relative audio paths; `SCENEKIT_DATA_ROOT` when absent.
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub features: FeatureSection,
    pub model: ModelConfig,
    pub folds: FoldSection,
    pub fusion: FusionSpec,
    pub synth: SynthSpec,
    pub paths: PathSection,
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML tree, creating tables as needed.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{p}' in '{key}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree: toml::Table = text.parse().map_err(CliError::config)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(CliError::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.features.dsp.validate().map_err(CliError::config)?;
        self.model.validate().map_err(CliError::config)?;
        if self.folds.file.is_none() && self.folds.k < 2 {
            return Err(CliError::Config("folds.k must be >= 2".into()));
        }
        self.fusion.validate().map_err(CliError::config)?;
        self.synth.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form of the whole config.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Hash of everything that determines extracted features.
    pub fn feature_hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(&self.features).expect("config serializes")))
    }

    pub fn fold_seed(&self) -> u64 {
        self.folds.seed.unwrap_or(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::from_toml(
            "seed = 3\n[model]\nkind = \"gmm\"\ncomponents = 8\n",
            &["model.components=4".into(), "features.kind=logmel60".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.features.kind, FeatureKind::Logmel60);
        match cfg.model {
            ModelConfig::Gmm(p) => assert_eq!(p.components, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        let err = RunConfig::from_toml("[model]\nkind = \"dnn\"\n[model.net]\ndropout = 0.9\n", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(RunConfig::from_toml("[model]\nkind = \"gmm\"\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["folds.k=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["nokey".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml(&a.to_toml(), &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.feature_hash().len(), 64);
        let c = RunConfig::from_toml("", &["features.dsp.hop=0.02".into()]).unwrap();
        assert_ne!(a.feature_hash(), c.feature_hash());
        let d = RunConfig::from_toml("", &["seed=9".into()]).unwrap();
        assert_eq!(a.feature_hash(), d.feature_hash());
    }
}
