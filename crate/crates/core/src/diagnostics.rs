//! Model introspection: spectra of first-layer weights, Savitzky-Golay
//! smoothing, and recurrent activation traces. Outputs are plain numeric
//! grids; see [`grid_to_csv`].

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::neural::{LayerSpec, Net, NeuralError, Scalar, Tensor};

pub const DEFAULT_SAVGOL_WINDOW: usize = 9;
pub const DEFAULT_SAVGOL_ORDER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DiagError {
    #[error("need at least {needed} values per row, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("window must be odd and greater than the polynomial order (window {window}, order {order})")]
    BadWindow { window: usize, order: usize },
    #[error("network has no dense layer")]
    NoDenseLayer,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// FFT magnitude of every row, bins `0..=D/2`.
pub fn weight_spectrum(weights: &Matrix) -> Result<Matrix, DiagError> {
    let d = weights.cols();
    if d < 2 {
        return Err(DiagError::TooShort { needed: 2, got: d });
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(d);
    let bins = d / 2 + 1;
    let mut out = Matrix::zeros(weights.rows(), bins);
    let mut buf = vec![Complex::new(0.0, 0.0); d];
    for (r, row) in weights.row_iter().enumerate() {
        buf.iter_mut().zip(row).for_each(|(c, &v)| *c = Complex::new(v, 0.0));
        fft.process(&mut buf);
        out.row_mut(r).iter_mut().zip(&buf).for_each(|(o, c)| *o = c.norm());
    }
    Ok(out)
}

/// `(1/D) Σ_k |X_k|²` over the full spectrum, rebuilt from the half
/// spectrum of a real signal of length `d`. Equals the signal energy.
pub fn half_spectrum_energy(half: &[f64], d: usize) -> f64 {
    let full: f64 = half
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mirrored = k != 0 && !(d % 2 == 0 && k == d / 2);
            m * m * if mirrored { 2.0 } else { 1.0 }
        })
        .sum();
    full / d as f64
}

/// Smoothing kernel: the least-squares polynomial fit of degree `order` over
/// `window` points, evaluated at the centre.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<Vec<f64>, DiagError> {
    if window % 2 == 0 || order >= window {
        return Err(DiagError::BadWindow { window, order });
    }
    let m = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |i, j| (i as f64 - m).powi(j as i32));
    let ata = a.transpose() * &a;
    let inv = ata.try_inverse().ok_or(DiagError::BadWindow { window, order })?;
    // Row 0 of (AᵀA)⁻¹Aᵀ gives the fitted value at offset zero.
    let h = inv.row(0) * a.transpose();
    Ok(h.iter().copied().collect())
}

/// Savitzky-Golay smoothing with mirror padding (the edge sample is not
/// repeated).
pub fn savgol_smooth(v: &[f64], window: usize, order: usize) -> Result<Vec<f64>, DiagError> {
    let h = savgol_coefficients(window, order)?;
    let n = v.len();
    if n < window {
        return Err(DiagError::TooShort { needed: window, got: n });
    }
    let half = (window / 2) as isize;
    let at = |i: isize| -> f64 {
        let j = if i < 0 {
            -i
        } else if i >= n as isize {
            2 * (n as isize - 1) - i
        } else {
            i
        };
        v[j as usize]
    };
    Ok((0..n as isize)
        .map(|i| h.iter().enumerate().map(|(k, c)| c * at(i + k as isize - half)).sum())
        .collect())
}

/// Kernel of the first dense layer as `units × inputs` (one row per unit).
pub fn first_dense_weights<T: Scalar>(net: &Net<T>) -> Result<Matrix, DiagError> {
    let i = net
        .spec()
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Dense { .. }))
        .ok_or(DiagError::NoDenseLayer)?;
    let w = &net.params()[i][0];
    let (inputs, units) = (w.shape()[0], w.shape()[1]);
    let data = w.data().iter().map(|v| v.to_f64().unwrap()).collect();
    Ok(Matrix::from_vec(inputs, units, data).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceDirection {
    #[default]
    Forward,
    Backward,
}

/// Hidden states of recurrent layer `layer` for one `T×F` input sequence,
/// as a `T×units` matrix in time order.
pub fn activation_trace<T: Scalar>(
    net: &Net<T>,
    layer: usize,
    direction: TraceDirection,
    sequence: &Matrix,
) -> Result<Matrix, DiagError> {
    let (t, f) = (sequence.rows(), sequence.cols());
    let x = Tensor::from_vec(&[1, t, f], sequence.as_slice().iter().map(|&v| T::lit(v)).collect())?;
    let h = net.recurrent_states(&x, layer, direction == TraceDirection::Backward)?;
    let units = h.shape()[2];
    Ok(Matrix::from_vec(t, units, h.data().iter().map(|v| v.to_f64().unwrap()).collect()))
}

/// Comma-separated grid, one matrix row per line, shortest round-trip floats.
pub fn grid_to_csv(m: &Matrix) -> String {
    let mut s = String::with_capacity(m.rows() * m.cols() * 12);
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}
