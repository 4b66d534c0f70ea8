use super::DspError;
use crate::matrix::Matrix;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over FFT bins, one row per mel band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Matrix,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    /// Filter edge/centre positions in fractional FFT bins (`n_mels + 2` points).
    pub points: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols()
    }

    /// Centre frequency of band `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        let n_fft = 2 * (self.n_bins() - 1);
        self.points[m + 1] * f64::from(self.sample_rate) / n_fft as f64
    }
}

/// Half-width of the narrowest allowed triangle, in FFT bins.
const MIN_HALF_WIDTH_BINS: f64 = 2.0;

/// Builds `n_mels` triangular filters with centres equally spaced on the mel
/// scale between `fmin` and `fmax`.
///
/// Edge points closer than two FFT bins are pushed apart (monotonically,
/// lowest first) so every filter covers at least three bins with its peak
/// strictly inside; this only affects the lowest bands when the mel spacing
/// is finer than the FFT resolution.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sr: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank, DspError> {
    let nyquist = f64::from(sr) / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(DspError::InvalidFrequencyRange(format!(
            "need 0 <= fmin < fmax <= {nyquist}, got fmin={fmin}, fmax={fmax}"
        )));
    }
    if n_mels == 0 {
        return Err(DspError::InvalidConfig("n_mels must be >= 1".into()));
    }
    if !n_fft.is_power_of_two() {
        return Err(DspError::NotPowerOfTwo(n_fft));
    }
    let n_bins = n_fft / 2 + 1;
    let bin_hz = f64::from(sr) / n_fft as f64;

    let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
    let mut points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64) / bin_hz)
        .collect();
    for i in 1..points.len() {
        points[i] = points[i].max(points[i - 1] + MIN_HALF_WIDTH_BINS);
    }
    let last = *points.last().unwrap();
    if last > (n_bins - 1) as f64 + 1e-9 {
        return Err(DspError::InvalidConfig(format!(
            "{n_mels} mel bands do not fit {n_bins} FFT bins between {fmin} and {fmax} Hz"
        )));
    }

    let mut weights = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let row = weights.row_mut(m);
        let first = lo.floor().max(0.0) as usize;
        let end = (hi.ceil() as usize).min(n_bins - 1);
        for (k, w) in row.iter_mut().enumerate().take(end + 1).skip(first) {
            let x = k as f64;
            *w = if x > lo && x <= mid {
                (x - lo) / (mid - lo)
            } else if x > mid && x < hi {
                (hi - x) / (hi - mid)
            } else {
                0.0
            };
        }
    }
    Ok(MelFilterbank {
        weights,
        sample_rate: sr,
        fmin,
        fmax,
        points,
    })
}

/// `out[t, m] = ln(max(fb_m . power_t, floor))`.
pub fn log_mel(power: &Matrix, fb: &MelFilterbank, floor: f64) -> Result<Matrix, DspError> {
    if power.cols() != fb.n_bins() {
        return Err(DspError::DimensionMismatch {
            expected: fb.n_bins(),
            got: power.cols(),
        });
    }
    let mut out = Matrix::zeros(power.rows(), fb.n_mels());
    for (t, p) in power.row_iter().enumerate() {
        for (m, o) in out.row_mut(t).iter_mut().enumerate() {
            let e: f64 = fb.weights.row(m).iter().zip(p).map(|(w, x)| w * x).sum();
            *o = e.max(floor).ln();
        }
    }
    Ok(out)
}
