use super::{DspError, FeatureSequence};
use crate::matrix::Matrix;

const STD_FLOOR: f64 = 1e-8;

/// Per-dimension zero-mean, unit-variance transform fit on training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits population mean and std. Sums run sequentially in row order.
    pub fn fit(frames: &Matrix) -> Result<Self, DspError> {
        Self::fit_rows(frames.rows(), frames.cols(), frames.row_iter().map(|r| r.iter().copied()))
    }

    /// Fits over the frames of several sequences, in the given order.
    pub fn fit_sequences(seqs: &[&FeatureSequence]) -> Result<Self, DspError> {
        let dim = seqs.first().map(|s| s.dim()).unwrap_or(0);
        if let Some(bad) = seqs.iter().find(|s| s.dim() != dim) {
            return Err(DspError::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        let n = seqs.iter().map(|s| s.num_frames()).sum();
        let rows = seqs
            .iter()
            .flat_map(|s| (0..s.num_frames()).map(move |t| s.frame(t).iter().map(|&v| f64::from(v))));
        Self::fit_rows(n, dim, rows)
    }

    fn fit_rows<I, R>(n: usize, dim: usize, rows: I) -> Result<Self, DspError>
    where
        I: Iterator<Item = R> + Clone,
        R: Iterator<Item = f64>,
    {
        if n < 2 {
            return Err(DspError::TooFewFrames { needed: 2, got: n });
        }
        let mut mean = vec![0.0; dim];
        for row in rows.clone() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply(&self, frames: &Matrix) -> Result<Matrix, DspError> {
        if frames.cols() != self.dim() {
            return Err(DspError::DimensionMismatch {
                expected: self.dim(),
                got: frames.cols(),
            });
        }
        let mut out = frames.clone();
        for t in 0..out.rows() {
            self.apply_row(out.row_mut(t));
        }
        Ok(out)
    }

    pub fn apply_sequence(&self, seq: &FeatureSequence) -> Result<Matrix, DspError> {
        self.apply(&seq.to_matrix())
    }
}
