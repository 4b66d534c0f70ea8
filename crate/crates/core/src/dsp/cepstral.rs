use serde::{Deserialize, Serialize};

use super::{log_mel, mel_filterbank, power_frames, DspConfig, DspError};
use crate::audio::{channel_view, AudioClip, ChannelView};
use crate::matrix::Matrix;

/// Cepstral coefficients kept per frame (the 0th is dropped).
pub const NUM_CEPSTRA: usize = 23;

/// How the 61 MFCC dimensions split into static, delta and delta-delta parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfccLayout {
    /// 23 static, 23 delta, first 15 delta-delta.
    #[serde(rename = "23_23_15")]
    Split23_23_15,
    /// 23 static, first 19 delta, first 19 delta-delta.
    #[serde(rename = "23_19_19")]
    Split23_19_19,
}

impl MfccLayout {
    fn parts(self) -> (usize, usize) {
        match self {
            MfccLayout::Split23_23_15 => (23, 15),
            MfccLayout::Split23_19_19 => (19, 19),
        }
    }
}

/// Orthonormal DCT-II matrix, `n × n`, row `k` holds basis function `k`.
pub fn dct_matrix(n: usize) -> Matrix {
    let mut d = Matrix::zeros(n, n);
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            d[(k, i)] = scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos();
        }
    }
    d
}

/// Cepstral coefficients 1..=23 of each log-mel frame.
pub fn mfcc(log_mel: &Matrix) -> Result<Matrix, DspError> {
    let n = log_mel.cols();
    if n < NUM_CEPSTRA + 1 {
        return Err(DspError::TooFewMelBands {
            needed: NUM_CEPSTRA + 1,
            got: n,
        });
    }
    let d = dct_matrix(n);
    let mut out = Matrix::zeros(log_mel.rows(), NUM_CEPSTRA);
    for (t, frame) in log_mel.row_iter().enumerate() {
        for (j, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = d.row(j + 1).iter().zip(frame).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Regression deltas over `±half_window` frames with edge replication:
/// `d_t = sum_n n (x_{t+n} - x_{t-n}) / (2 sum_n n^2)`.
pub fn deltas(seq: &Matrix, half_window: usize) -> Result<Matrix, DspError> {
    if half_window < 1 {
        return Err(DspError::InvalidHalfWindow);
    }
    let t_len = seq.rows();
    if t_len == 0 {
        return Err(DspError::TooFewFrames { needed: 1, got: 0 });
    }
    let denom: f64 = 2.0 * (1..=half_window).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len - 1;
    let mut out = Matrix::zeros(t_len, seq.cols());
    for t in 0..t_len {
        for n in 1..=half_window {
            let ahead = seq.row((t + n).min(last));
            let behind = seq.row(t.saturating_sub(n));
            let w = n as f64 / denom;
            for ((o, a), b) in out.row_mut(t).iter_mut().zip(ahead).zip(behind) {
                *o += w * (a - b);
            }
        }
    }
    Ok(out)
}

/// Static MFCCs of a mono signal (frames × 23).
pub(crate) fn static_mfcc(samples: &[f64], sr: u32, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let power = power_frames(samples, sr, cfg)?;
    let fb = mel_filterbank(cfg.mfcc_mels, cfg.n_fft, sr, cfg.fmin, cfg.fmax_for(sr))?;
    mfcc(&log_mel(&power, &fb, cfg.log_floor)?)
}

/// 61-dim MFCC frames: statics, deltas and delta-deltas per `cfg.mfcc_layout`.
pub fn mfcc61(samples: &[f64], sr: u32, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let stat = static_mfcc(samples, sr, cfg)?;
    let d1 = deltas(&stat, cfg.delta_half_window)?;
    let d2 = deltas(&d1, cfg.delta_half_window)?;
    let (n_d1, n_d2) = cfg.mfcc_layout.parts();
    let dim = NUM_CEPSTRA + n_d1 + n_d2;
    let mut out = Matrix::zeros(stat.rows(), dim);
    for t in 0..stat.rows() {
        let row = out.row_mut(t);
        row[..NUM_CEPSTRA].copy_from_slice(stat.row(t));
        row[NUM_CEPSTRA..NUM_CEPSTRA + n_d1].copy_from_slice(&d1.row(t)[..n_d1]);
        row[NUM_CEPSTRA + n_d1..].copy_from_slice(&d2.row(t)[..n_d2]);
    }
    Ok(out)
}

/// Binaural MFCCs: `[mfcc61(left) | mfcc61(right) | mfcc61(left - right)]`.
pub fn bimfcc(clip: &AudioClip, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let sr = clip.sample_rate();
    let blocks = [ChannelView::Left, ChannelView::Right, ChannelView::Diff]
        .into_iter()
        .map(|v| {
            let mono = channel_view(clip, v)?;
            mfcc61(&mono.samples, sr, cfg)
        })
        .collect::<Result<Vec<_>, DspError>>()?;
    let frames = blocks[0].rows();
    let width = blocks[0].cols();
    let mut out = Matrix::zeros(frames, 3 * width);
    for t in 0..frames {
        for (b, block) in blocks.iter().enumerate() {
            out.row_mut(t)[b * width..(b + 1) * width].copy_from_slice(block.row(t));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_dct2(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let s: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                    .sum();
                s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
            })
            .collect()
    }

    #[test]
    fn dct_is_orthonormal() {
        for n in [24, 40, 60] {
            let d = dct_matrix(n);
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = d.row(i).iter().zip(d.row(j)).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn mfcc_of_constant_is_zero() {
        let lm = Matrix::from_vec(3, 40, vec![-4.2; 120]);
        let c = mfcc(&lm).unwrap();
        assert_eq!(c.cols(), 23);
        assert!(c.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mfcc_matches_brute_force_dct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame: Vec<f64> = (0..40).map(|_| rng.random_range(-20.0..5.0)).collect();
        let c = mfcc(&Matrix::from_vec(1, 40, frame.clone())).unwrap();
        let brute = brute_dct2(&frame);
        for j in 0..23 {
            assert!((c[(0, j)] - brute[j + 1]).abs() < 1e-10);
        }
    }

    #[test]
    fn full_dct_round_trip_reconstructs_log_mel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(-23.0..3.0)).collect();
        let d = dct_matrix(60);
        let coeffs: Vec<f64> = (0..60).map(|k| d.row(k).iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        for i in 0..60 {
            let back: f64 = (0..60).map(|k| d[(k, i)] * coeffs[k]).sum();
            assert!((back - x[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn too_few_bands() {
        assert_eq!(
            mfcc(&Matrix::zeros(1, 23)).unwrap_err(),
            DspError::TooFewMelBands { needed: 24, got: 23 }
        );
    }

    #[test]
    fn deltas_constant_ramp_and_linearity() {
        let c = Matrix::from_vec(6, 2, vec![3.0; 12]);
        assert!(deltas(&c, 2).unwrap().as_slice().iter().all(|&v| v == 0.0));

        let ramp = Matrix::from_vec(10, 1, (0..10).map(f64::from).collect());
        let d = deltas(&ramp, 2).unwrap();
        for t in 2..8 {
            assert!((d[(t, 0)] - 1.0).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_vec(9, 3, (0..27).map(|_| rng.random::<f64>()).collect());
        let y = Matrix::from_vec(9, 3, (0..27).map(|_| rng.random::<f64>()).collect());
        let combo = Matrix::from_vec(
            9,
            3,
            x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
        );
        let (dx, dy, dc) = (deltas(&x, 2).unwrap(), deltas(&y, 2).unwrap(), deltas(&combo, 2).unwrap());
        for i in 0..27 {
            let want = 2.0 * dx.as_slice()[i] - 0.5 * dy.as_slice()[i];
            assert!((dc.as_slice()[i] - want).abs() < 1e-12);
        }
        assert_eq!(deltas(&x, 0), Err(DspError::InvalidHalfWindow));
    }

    #[test]
    fn silence_mfcc61() {
        let cfg = DspConfig::default();
        let m = mfcc61(&vec![0.0; 44100], 44100, &cfg).unwrap();
        assert_eq!(m.cols(), 61);
        assert!(m.as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn both_layouts_are_61_dims() {
        // 23 static + a + b = 61 with a, b <= 23 admits several splits; the two
        // supported ones are checked here.
        for layout in [MfccLayout::Split23_23_15, MfccLayout::Split23_19_19] {
            let (a, b) = layout.parts();
            assert_eq!(NUM_CEPSTRA + a + b, 61);
            let cfg = DspConfig {
                mfcc_layout: layout,
                ..DspConfig::default()
            };
            let sig: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.05).sin() * 0.4).collect();
            assert_eq!(mfcc61(&sig, 44100, &cfg).unwrap().cols(), 61);
        }
    }

    #[test]
    fn bimfcc_blocks() {
        let cfg = DspConfig::default();
        let l: Vec<f64> = (0..6000).map(|i| (i as f64 * 0.031).sin() * 0.5).collect();
        let r: Vec<f64> = (0..6000).map(|i| (i as f64 * 0.017).cos() * 0.3).collect();

        let same = AudioClip::new(vec![l.clone(), l.clone()], 44100).unwrap();
        let b = bimfcc(&same, &cfg).unwrap();
        assert_eq!(b.cols(), 183);
        let silence = mfcc61(&vec![0.0; 6000], 44100, &cfg).unwrap();
        for t in 0..b.rows() {
            assert_eq!(&b.row(t)[..61], &b.row(t)[61..122]);
            assert_eq!(&b.row(t)[122..], silence.row(t));
        }

        let lr = bimfcc(&AudioClip::new(vec![l.clone(), r.clone()], 44100).unwrap(), &cfg).unwrap();
        let rl = bimfcc(&AudioClip::new(vec![r, l], 44100).unwrap(), &cfg).unwrap();
        for t in 0..lr.rows() {
            assert_eq!(&lr.row(t)[..61], &rl.row(t)[61..122]);
            assert_eq!(&lr.row(t)[61..122], &rl.row(t)[..61]);
            // Negating the difference signal leaves its power spectrum unchanged.
            for (a, b) in lr.row(t)[122..].iter().zip(&rl.row(t)[122..]) {
                assert!((a - b).abs() < 1e-9);
            }
        }

        let mono = AudioClip::new(vec![vec![0.0; 6000]], 44100).unwrap();
        assert!(bimfcc(&mono, &cfg).is_err());
    }
}
