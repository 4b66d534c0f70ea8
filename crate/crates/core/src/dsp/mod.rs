//! Feature extraction: framing, power spectra, mel filterbanks, MFCCs with
//! regression deltas, binaural MFCCs, windowed functional statistics, and
//! train-set standardization.
//!
//! Every extractor is a pure function of the clip and a [`DspConfig`], so
//! the same input always yields a bit-identical [`FeatureSequence`].

mod cepstral;
mod feature_file;
mod frames;
mod functional;
mod mel;
mod standardize;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{channel_view, AudioClip, ChannelView, WavError};
use crate::matrix::Matrix;

pub use cepstral::{bimfcc, dct_matrix, deltas, mfcc, mfcc61, MfccLayout, NUM_CEPSTRA};
pub use feature_file::{decode_features, encode_features, FEATURE_MAGIC};
pub use frames::{frame_signal, hann_window, power_spectrum, SpectrumAnalyzer};
pub use functional::{
    functional_features, pitch_autocorr, zero_crossing_rate, DescriptorSet, FUNCTIONAL_NAMES,
    LLD_NAMES,
};
pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use standardize::Standardizer;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("signal has {samples} samples, shorter than one {needed}-sample window")]
    SignalTooShort { samples: usize, needed: usize },
    #[error("FFT size {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("frame of {frame} samples does not fit FFT size {n_fft}")]
    FrameTooLong { frame: usize, n_fft: usize },
    #[error("invalid frequency range: {0}")]
    InvalidFrequencyRange(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("MFCC needs at least {needed} mel bands, got {got}")]
    TooFewMelBands { needed: usize, got: usize },
    #[error("delta half window must be >= 1")]
    InvalidHalfWindow,
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("invalid DSP configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Audio(#[from] WavError),
}

/// The six feature representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc61,
    Bimfcc183,
    Logmel60,
    Logmel200,
    /// Compact functional set (stands in for the 983-dim OpenSMILE selection).
    Func983like,
    /// Extended functional set with first and second order descriptors.
    Func6klike,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::Mfcc61,
        FeatureKind::Bimfcc183,
        FeatureKind::Logmel60,
        FeatureKind::Logmel200,
        FeatureKind::Func983like,
        FeatureKind::Func6klike,
    ];

    /// Fixed dimension, where the kind has one. Functional kinds depend on the
    /// descriptor set and report `None`.
    pub fn fixed_dim(self) -> Option<usize> {
        match self {
            FeatureKind::Mfcc61 => Some(61),
            FeatureKind::Bimfcc183 => Some(183),
            FeatureKind::Logmel60 => Some(60),
            FeatureKind::Logmel200 => Some(200),
            FeatureKind::Func983like | FeatureKind::Func6klike => None,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::Mfcc61 => 1,
            FeatureKind::Bimfcc183 => 2,
            FeatureKind::Logmel60 => 3,
            FeatureKind::Logmel200 => 4,
            FeatureKind::Func983like => 5,
            FeatureKind::Func6klike => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mfcc61 => "mfcc61",
            FeatureKind::Bimfcc183 => "bimfcc183",
            FeatureKind::Logmel60 => "logmel60",
            FeatureKind::Logmel200 => "logmel200",
            FeatureKind::Func983like => "func983like",
            FeatureKind::Func6klike => "func6klike",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mfcc61" | "mfcc" => FeatureKind::Mfcc61,
            "bimfcc183" | "bimfcc" => FeatureKind::Bimfcc183,
            "logmel60" => FeatureKind::Logmel60,
            "logmel200" => FeatureKind::Logmel200,
            "func983like" | "smile983" => FeatureKind::Func983like,
            "func6klike" | "smile6k" => FeatureKind::Func6klike,
            other => return Err(format!("unknown feature kind '{other}'")),
        })
    }
}

/// Time-ordered matrix of frame vectors. Values are stored as `f32`, the
/// precision of the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    kind: FeatureKind,
    dim: usize,
    frame_period: f32,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        kind: FeatureKind,
        dim: usize,
        frame_period: f32,
        data: Vec<f32>,
    ) -> Result<Self, DspError> {
        if let Some(expected) = kind.fixed_dim() {
            if dim != expected {
                return Err(DspError::DimensionMismatch { expected, got: dim });
            }
        }
        if dim == 0 || data.len() % dim != 0 {
            return Err(DspError::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self {
            kind,
            dim,
            frame_period,
            data,
        })
    }

    pub fn from_matrix(kind: FeatureKind, frames: &Matrix, frame_period: f64) -> Result<Self, DspError> {
        let data = frames.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(kind, frames.cols(), frame_period as f32, data)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period(&self) -> f32 {
        self.frame_period
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.num_frames(),
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Concatenates sequences along time. All parts must share kind and dim.
    pub fn concat(parts: &[&FeatureSequence]) -> Result<Self, DspError> {
        let first = parts.first().ok_or(DspError::TooFewFrames { needed: 1, got: 0 })?;
        let mut data = Vec::new();
        for p in parts {
            if p.dim != first.dim {
                return Err(DspError::DimensionMismatch {
                    expected: first.dim,
                    got: p.dim,
                });
            }
            data.extend_from_slice(&p.data);
        }
        Self::new(first.kind, first.dim, first.frame_period, data)
    }
}

/// Analysis parameters shared by all extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    /// Analysis window length in seconds.
    pub win_len: f64,
    /// Hop between frame starts in seconds.
    pub hop: f64,
    pub n_fft: usize,
    pub fmin: f64,
    /// Upper mel edge; `None` means Nyquist.
    pub fmax: Option<f64>,
    /// Mel bands feeding the cepstral transform.
    pub mfcc_mels: usize,
    pub delta_half_window: usize,
    pub mfcc_layout: MfccLayout,
    pub log_floor: f64,
    /// Functional-feature window in seconds (non-overlapping).
    pub functional_window: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            win_len: 0.020,
            hop: 0.010,
            n_fft: 1024,
            fmin: 0.0,
            fmax: None,
            mfcc_mels: 40,
            delta_half_window: 2,
            mfcc_layout: MfccLayout::Split23_23_15,
            log_floor: 1e-10,
            functional_window: 0.100,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if !(self.win_len > 0.0 && self.hop > 0.0) {
            return Err(DspError::InvalidConfig("window and hop must be positive".into()));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(DspError::NotPowerOfTwo(self.n_fft));
        }
        if self.mfcc_mels < NUM_CEPSTRA + 1 {
            return Err(DspError::TooFewMelBands {
                needed: NUM_CEPSTRA + 1,
                got: self.mfcc_mels,
            });
        }
        if self.delta_half_window < 1 {
            return Err(DspError::InvalidHalfWindow);
        }
        if !(self.log_floor > 0.0) {
            return Err(DspError::InvalidConfig("log floor must be positive".into()));
        }
        if !(self.functional_window >= self.hop) {
            return Err(DspError::InvalidConfig(
                "functional window must span at least one hop".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn window_samples(&self, sr: u32) -> usize {
        (self.win_len * f64::from(sr)).round() as usize
    }

    pub(crate) fn hop_samples(&self, sr: u32) -> usize {
        ((self.hop * f64::from(sr)).round() as usize).max(1)
    }

    pub(crate) fn fmax_for(&self, sr: u32) -> f64 {
        self.fmax.unwrap_or(f64::from(sr) / 2.0)
    }
}

/// Framed, windowed power spectra of a mono signal (frames × bins).
pub fn power_frames(samples: &[f64], sr: u32, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let frames = frame_signal(samples, sr, cfg.win_len, cfg.hop)?;
    let analyzer = SpectrumAnalyzer::new(cfg.n_fft)?;
    let bins = cfg.n_fft / 2 + 1;
    let mut out = Matrix::zeros(frames.rows(), bins);
    for (t, frame) in frames.row_iter().enumerate() {
        analyzer.power_into(frame, out.row_mut(t))?;
    }
    Ok(out)
}

/// Log-mel features of the clip's mid channel with `n_mels` bands.
pub fn logmel_features(clip: &AudioClip, n_mels: usize, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let mono = channel_view(clip, ChannelView::Mid)?;
    let sr = clip.sample_rate();
    let power = power_frames(&mono.samples, sr, cfg)?;
    let fb = mel_filterbank(n_mels, cfg.n_fft, sr, cfg.fmin, cfg.fmax_for(sr))?;
    log_mel(&power, &fb, cfg.log_floor)
}

/// Runs the extractor for `kind` on a clip.
pub fn extract(clip: &AudioClip, kind: FeatureKind, cfg: &DspConfig) -> Result<FeatureSequence, DspError> {
    cfg.validate()?;
    let hop = cfg.hop;
    match kind {
        FeatureKind::Mfcc61 => {
            let mono = channel_view(clip, ChannelView::Mid)?;
            let m = mfcc61(&mono.samples, clip.sample_rate(), cfg)?;
            FeatureSequence::from_matrix(kind, &m, hop)
        }
        FeatureKind::Bimfcc183 => FeatureSequence::from_matrix(kind, &bimfcc(clip, cfg)?, hop),
        FeatureKind::Logmel60 => FeatureSequence::from_matrix(kind, &logmel_features(clip, 60, cfg)?, hop),
        FeatureKind::Logmel200 => {
            FeatureSequence::from_matrix(kind, &logmel_features(clip, 200, cfg)?, hop)
        }
        FeatureKind::Func983like => {
            let m = functional_features(clip, cfg, DescriptorSet::Compact)?;
            FeatureSequence::from_matrix(kind, &m, cfg.functional_window)
        }
        FeatureKind::Func6klike => {
            let m = functional_features(clip, cfg, DescriptorSet::Extended)?;
            FeatureSequence::from_matrix(kind, &m, cfg.functional_window)
        }
    }
}
