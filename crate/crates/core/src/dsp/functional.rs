//! Windowed functional statistics over frame-level descriptors.
//!
//! Low-level descriptors are computed per analysis frame on the mid channel,
//! then summarised over non-overlapping windows (default 100 ms). Output
//! layout is descriptor-major: for each descriptor in [`LLD_NAMES`] order (and,
//! for the extended set, its delta then delta-delta blocks), the functionals in
//! [`FUNCTIONAL_NAMES`] order.

use serde::{Deserialize, Serialize};

use super::cepstral::{deltas, mfcc};
use super::frames::{frame_count, hann_window};
use super::{log_mel, mel_filterbank, DspConfig, DspError, SpectrumAnalyzer, NUM_CEPSTRA};
use crate::audio::{channel_view, AudioClip, ChannelView};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorSet {
    Compact,
    /// Adds delta and delta-delta trajectories of every descriptor.
    Extended,
}

pub const FUNCTIONAL_NAMES: [&str; 11] = [
    "mean", "std", "min", "max", "range", "skewness", "kurtosis", "p25", "p50", "p75", "slope",
];

/// Scalar descriptors, followed by the 23 MFCCs.
pub const LLD_NAMES: [&str; 7] = [
    "log_energy",
    "zcr",
    "mcr",
    "pitch_hz",
    "spectral_centroid_hz",
    "spectral_rolloff85_hz",
    "spectral_flux",
];

const PITCH_MIN_HZ: f64 = 60.0;
const PITCH_MAX_HZ: f64 = 1000.0;
const VOICING_THRESHOLD: f64 = 0.3;
const ROLLOFF_FRACTION: f64 = 0.85;

/// Sign changes between consecutive samples divided by `len - 1`; zero
/// counts as positive.
pub fn zero_crossing_rate(x: &[f64]) -> f64 {
    crossing_rate(x, 0.0)
}

fn crossing_rate(x: &[f64], level: f64) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let crossings = x
        .windows(2)
        .filter(|w| (w[0] >= level) != (w[1] >= level))
        .count();
    crossings as f64 / (x.len() - 1) as f64
}

/// Autocorrelation pitch estimate in Hz, searching lags for 60–1000 Hz.
/// Returns 0 for unvoiced or silent frames.
pub fn pitch_autocorr(frame: &[f64], sr: u32) -> f64 {
    let n = frame.len();
    let mean = frame.iter().sum::<f64>() / n.max(1) as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let r0: f64 = x.iter().map(|v| v * v).sum();
    if r0 <= 1e-12 {
        return 0.0;
    }
    let sr = f64::from(sr);
    let min_lag = (sr / PITCH_MAX_HZ).floor().max(1.0) as usize;
    let max_lag = ((sr / PITCH_MIN_HZ).ceil() as usize).min(n.saturating_sub(1));
    let mut best = (0usize, f64::NEG_INFINITY);
    for lag in min_lag..=max_lag {
        let r: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
        if r > best.1 {
            best = (lag, r);
        }
    }
    if best.0 == 0 || best.1 / r0 < VOICING_THRESHOLD {
        0.0
    } else {
        sr / best.0 as f64
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// The eleven functionals of one descriptor trajectory.
pub(crate) fn functionals(x: &[f64]) -> [f64; 11] {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();
    let (skew, kurt) = if m2 > 1e-24 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    } else {
        (0.0, 0.0)
    };
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);

    let t_mean = (n - 1.0) / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - mean);
        sxx += dt * dt;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    [
        mean,
        std,
        min,
        max,
        max - min,
        skew,
        kurt,
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.50),
        percentile(&sorted, 0.75),
        slope,
    ]
}

/// Frame-level descriptors (frames × 30) of a mono signal.
pub(crate) fn low_level_descriptors(samples: &[f64], sr: u32, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    let n_frames = frame_count(samples.len(), win, hop)?;
    let analyzer = SpectrumAnalyzer::new(cfg.n_fft)?;
    let window = hann_window(win);
    let bins = analyzer.bins();
    let bin_hz = f64::from(sr) / cfg.n_fft as f64;

    let mut power = Matrix::zeros(n_frames, bins);
    let mut lld = Matrix::zeros(n_frames, LLD_NAMES.len() + NUM_CEPSTRA);
    let mut prev_mag: Option<Vec<f64>> = None;
    let mut windowed = vec![0.0; win];
    for t in 0..n_frames {
        let raw = &samples[t * hop..t * hop + win];
        for ((w, s), h) in windowed.iter_mut().zip(raw).zip(&window) {
            *w = s * h;
        }
        analyzer.power_into(&windowed, power.row_mut(t))?;
        let p = power.row(t);

        let mean_sq = raw.iter().map(|v| v * v).sum::<f64>() / win as f64;
        let mean = raw.iter().sum::<f64>() / win as f64;
        let total: f64 = p.iter().sum();
        let centroid = if total > 0.0 {
            p.iter().enumerate().map(|(k, v)| k as f64 * bin_hz * v).sum::<f64>() / total
        } else {
            0.0
        };
        let rolloff = if total > 0.0 {
            let target = ROLLOFF_FRACTION * total;
            let mut acc = 0.0;
            let k = p
                .iter()
                .position(|v| {
                    acc += v;
                    acc >= target
                })
                .unwrap_or(bins - 1);
            k as f64 * bin_hz
        } else {
            0.0
        };
        let mag: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
        let mag_sum: f64 = mag.iter().sum();
        let flux = match &prev_mag {
            Some(prev) => {
                let prev_sum: f64 = prev.iter().sum();
                let norm = |v: f64, s: f64| if s > 0.0 { v / s } else { 0.0 };
                mag.iter()
                    .zip(prev)
                    .map(|(a, b)| (norm(*a, mag_sum) - norm(*b, prev_sum)).powi(2))
                    .sum()
            }
            None => 0.0,
        };
        prev_mag = Some(mag);

        let row = lld.row_mut(t);
        row[0] = (mean_sq + cfg.log_floor).ln();
        row[1] = zero_crossing_rate(raw);
        row[2] = crossing_rate(raw, mean);
        row[3] = pitch_autocorr(raw, sr);
        row[4] = centroid;
        row[5] = rolloff;
        row[6] = flux;
    }

    let fb = mel_filterbank(cfg.mfcc_mels, cfg.n_fft, sr, cfg.fmin, cfg.fmax_for(sr))?;
    let cep = mfcc(&log_mel(&power, &fb, cfg.log_floor)?)?;
    for t in 0..n_frames {
        lld.row_mut(t)[LLD_NAMES.len()..].copy_from_slice(cep.row(t));
    }
    Ok(lld)
}

/// Functional features of a clip's mid channel, one row per window.
pub fn functional_features(clip: &AudioClip, cfg: &DspConfig, set: DescriptorSet) -> Result<Matrix, DspError> {
    let sr = clip.sample_rate();
    let window_samples = (cfg.functional_window * f64::from(sr)).round() as usize;
    if window_samples == 0 || clip.len() < window_samples {
        return Err(DspError::SignalTooShort {
            samples: clip.len(),
            needed: window_samples.max(1),
        });
    }
    let mono = channel_view(clip, ChannelView::Mid)?;
    let lld = low_level_descriptors(&mono.samples, sr, cfg)?;
    let traj = match set {
        DescriptorSet::Compact => lld,
        DescriptorSet::Extended => {
            let d1 = deltas(&lld, cfg.delta_half_window)?;
            let d2 = deltas(&d1, cfg.delta_half_window)?;
            let w = lld.cols();
            let mut all = Matrix::zeros(lld.rows(), 3 * w);
            for t in 0..lld.rows() {
                let row = all.row_mut(t);
                row[..w].copy_from_slice(lld.row(t));
                row[w..2 * w].copy_from_slice(d1.row(t));
                row[2 * w..].copy_from_slice(d2.row(t));
            }
            all
        }
    };

    // Window j holds the frames whose start sample lies in [j*W, (j+1)*W).
    let hop = cfg.hop_samples(sr);
    let n_windows = clip.len() / window_samples;
    let n_desc = traj.cols();
    let mut out = Matrix::zeros(n_windows, n_desc * FUNCTIONAL_NAMES.len());
    let mut column = Vec::new();
    for j in 0..n_windows {
        let first = (j * window_samples).div_ceil(hop);
        let end = ((j + 1) * window_samples).div_ceil(hop).min(traj.rows());
        if first >= end {
            return Err(DspError::TooFewFrames { needed: 1, got: 0 });
        }
        for d in 0..n_desc {
            column.clear();
            column.extend((first..end).map(|t| traj[(t, d)]));
            let f = functionals(&column);
            out.row_mut(j)[d * 11..(d + 1) * 11].copy_from_slice(&f);
        }
    }
    Ok(out)
}
