use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::DspError;
use crate::matrix::Matrix;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of complete frames; trailing partial frames are dropped.
pub(crate) fn frame_count(len: usize, win: usize, hop: usize) -> Result<usize, DspError> {
    if win == 0 || len < win {
        return Err(DspError::SignalTooShort {
            samples: len,
            needed: win.max(1),
        });
    }
    Ok((len - win) / hop + 1)
}

/// Splits a signal into Hann-windowed frames (frames × window samples).
/// Frame `i` starts at sample `i * hop`.
pub fn frame_signal(samples: &[f64], sr: u32, win_len: f64, hop: f64) -> Result<Matrix, DspError> {
    let win = (win_len * f64::from(sr)).round() as usize;
    let hop = ((hop * f64::from(sr)).round() as usize).max(1);
    let n = frame_count(samples.len(), win, hop)?;
    let window = hann_window(win);
    let mut out = Matrix::zeros(n, win);
    for t in 0..n {
        let src = &samples[t * hop..t * hop + win];
        for ((o, s), w) in out.row_mut(t).iter_mut().zip(src).zip(&window) {
            *o = s * w;
        }
    }
    Ok(out)
}

/// Reusable FFT plan producing half-spectrum power vectors.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectrumAnalyzer {
    pub fn new(n_fft: usize) -> Result<Self, DspError> {
        if !n_fft.is_power_of_two() {
            return Err(DspError::NotPowerOfTwo(n_fft));
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { n_fft, fft })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Writes `|FFT_k|^2` for `k = 0..=n_fft/2` into `out`. The frame is
    /// zero-padded to the FFT size.
    pub fn power_into(&self, frame: &[f64], out: &mut [f64]) -> Result<(), DspError> {
        if frame.len() > self.n_fft {
            return Err(DspError::FrameTooLong {
                frame: frame.len(),
                n_fft: self.n_fft,
            });
        }
        if out.len() != self.bins() {
            return Err(DspError::DimensionMismatch {
                expected: self.bins(),
                got: out.len(),
            });
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (b, &x) in buf.iter_mut().zip(frame) {
            b.re = x;
        }
        self.fft.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.norm_sqr();
        }
        Ok(())
    }

    pub fn power(&self, frame: &[f64]) -> Result<Vec<f64>, DspError> {
        let mut out = vec![0.0; self.bins()];
        self.power_into(frame, &mut out)?;
        Ok(out)
    }
}

/// One-shot power spectrum of a single frame.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Result<Vec<f64>, DspError> {
    SpectrumAnalyzer::new(n_fft)?.power(frame)
}
