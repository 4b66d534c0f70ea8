use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenekit::diagnostics::*;
use scenekit::matrix::Matrix;
use scenekit::neural::{LayerSpec, Net, NetSpec, Tensor};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn direct_dft_magnitude(x: &[f64], k: usize) -> f64 {
    let d = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let a = -2.0 * PI * (k * n) as f64 / d;
        re += v * a.cos();
        im += v * a.sin();
    }
    re.hypot(im)
}

#[test]
fn spectrum_matches_direct_dft() {
    for (seed, d) in [(0, 61), (1, 64), (2, 183), (3, 2), (4, 7)] {
        let w = random_matrix(5, d, seed);
        let s = weight_spectrum(&w).unwrap();
        assert_eq!((s.rows(), s.cols()), (5, d / 2 + 1));
        for r in 0..5 {
            for k in 0..s.cols() {
                assert!((s[(r, k)] - direct_dft_magnitude(w.row(r), k)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn parseval_holds_for_odd_and_even_lengths() {
    for (seed, d) in [(5, 60), (6, 61), (7, 2), (8, 3)] {
        let w = random_matrix(8, d, seed);
        let s = weight_spectrum(&w).unwrap();
        for r in 0..8 {
            let energy: f64 = w.row(r).iter().map(|v| v * v).sum();
            assert!((half_spectrum_energy(s.row(r), d) - energy).abs() < 1e-9);
        }
    }
}

#[test]
fn single_column_is_too_short() {
    assert!(weight_spectrum(&Matrix::zeros(3, 1)).is_err());
}

#[test]
fn savgol_rejects_bad_windows() {
    assert!(savgol_coefficients(4, 2).is_err());
    assert!(savgol_coefficients(5, 5).is_err());
    assert!(savgol_smooth(&[1.0; 4], 5, 2).is_err());
}

#[test]
fn savgol_keeps_constants_everywhere() {
    let v = vec![3.25; 20];
    for (w, o) in [(5, 2), (9, 3), (DEFAULT_SAVGOL_WINDOW, DEFAULT_SAVGOL_ORDER), (7, 0)] {
        for x in savgol_smooth(&v, w, o).unwrap() {
            assert!((x - 3.25).abs() < 1e-12);
        }
    }
}

/// One bidirectional GRU layer over `[t, f]`, flattened into a softmax.
fn recurrent_net(t: usize, f: usize, units: usize, seed: u64) -> Net<f64> {
    let spec = NetSpec::new(
        vec![t, f],
        vec![
            LayerSpec::Bidirectional {
                units,
                return_sequences: true,
            },
            LayerSpec::Flatten,
            LayerSpec::Softmax { classes: 3 },
        ],
    )
    .unwrap();
    Net::init(spec, seed).unwrap()
}

#[test]
fn zero_network_on_zero_input_traces_zero() {
    let net = recurrent_net(12, 4, 5, 0);
    let params: Vec<Vec<Tensor<f64>>> = net
        .params()
        .iter()
        .map(|layer| layer.iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let zero = Net::from_parts(net.spec().clone(), params, net.state().to_vec()).unwrap();
    for dir in [TraceDirection::Forward, TraceDirection::Backward] {
        let trace = activation_trace(&zero, 0, dir, &Matrix::zeros(12, 4)).unwrap();
        assert_eq!((trace.rows(), trace.cols()), (12, 5));
        assert!(trace.as_slice().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn trace_has_one_row_per_frame() {
    let net = recurrent_net(30, 3, 4, 1);
    let x = random_matrix(30, 3, 2);
    let trace = activation_trace(&net, 0, TraceDirection::Forward, &x).unwrap();
    assert_eq!((trace.rows(), trace.cols()), (30, 4));
    assert!(matches!(
        activation_trace(&net, 1, TraceDirection::Forward, &x),
        Err(DiagError::Neural(_))
    ));
}

#[test]
fn forward_trace_is_causal_and_differs_from_backward() {
    let net = recurrent_net(25, 3, 4, 3);
    let x = random_matrix(25, 3, 4);
    let fwd = activation_trace(&net, 0, TraceDirection::Forward, &x).unwrap();
    let bwd = activation_trace(&net, 0, TraceDirection::Backward, &x).unwrap();
    assert_ne!(fwd, bwd);
    let mut prefix = x.clone();
    for t in 20..25 {
        prefix.row_mut(t).iter_mut().for_each(|v| *v = 9.0);
    }
    let fwd2 = activation_trace(&net, 0, TraceDirection::Forward, &prefix).unwrap();
    for t in 0..20 {
        assert_eq!(fwd.row(t), fwd2.row(t), "forward state at {t} depends on the future");
    }
}

/// Constant input drives a contractive GRU to a fixed point: step-to-step
/// change late in the trace is far below the change early on. Recurrent
/// weights are scaled down so every sampled cell is contractive.
#[test]
fn constant_input_converges_to_fixed_point() {
    let (t, f, units) = (100, 4, 8);
    let mut converged = 0;
    for seed in 0..20 {
        let mut net = recurrent_net(t, f, units, seed);
        for p in [1, 4] {
            let u = &mut net.params_mut()[0][p];
            u.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let frame: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_rows(&vec![frame; t], f);
        let trace = activation_trace(&net, 0, TraceDirection::Forward, &x).unwrap();
        let step = |i: usize| -> f64 {
            trace.row(i).iter().zip(trace.row(i - 1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let early: f64 = (1..11).map(step).sum();
        let late: f64 = (90..100).map(step).sum();
        if late < 1e-3 * early.max(1e-12) || late < 1e-9 {
            converged += 1;
        }
    }
    assert!(converged >= 19, "{converged}/20 traces converged");
}

#[test]
fn first_dense_weights_orientation() {
    let spec = NetSpec::new(vec![6], vec![LayerSpec::Dense { units: 4 }, LayerSpec::Relu, LayerSpec::Softmax { classes: 2 }]).unwrap();
    let net = Net::<f64>::init(spec, 0).unwrap();
    let w = first_dense_weights(&net).unwrap();
    assert_eq!((w.rows(), w.cols()), (4, 6));
    let kernel = &net.params()[0][0];
    assert_eq!(w[(2, 5)], kernel.data()[5 * 4 + 2]);
}

#[test]
fn grid_csv_round_trips() {
    let m = random_matrix(3, 4, 9);
    let csv = grid_to_csv(&m);
    let back: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
    assert_eq!(back, m.as_slice());
    assert_eq!(csv.lines().count(), 3);
}

proptest! {
    #[test]
    fn savgol_is_linear(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let sx = savgol_smooth(&x, 9, 3).unwrap();
        let sy = savgol_smooth(&y, 9, 3).unwrap();
        let sc = savgol_smooth(&combo, 9, 3).unwrap();
        for i in 0..40 {
            prop_assert!((sc[i] - a * sx[i] - b * sy[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn savgol_is_shift_equivariant_in_the_interior(seed in any::<u64>(), shift in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted = &x[shift..];
        let sx = savgol_smooth(&x, 7, 2).unwrap();
        let ss = savgol_smooth(shifted, 7, 2).unwrap();
        for i in 3..(shifted.len() - 3) {
            prop_assert!((ss[i] - sx[i + shift]).abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_preserves_rows_and_energy(rows in 1usize..6, d in 2usize..80, seed in any::<u64>()) {
        let w = random_matrix(rows, d, seed);
        let s = weight_spectrum(&w).unwrap();
        prop_assert_eq!(s.rows(), rows);
        for r in 0..rows {
            let energy: f64 = w.row(r).iter().map(|v| v * v).sum();
            prop_assert!((half_spectrum_energy(s.row(r), d) - energy).abs() < 1e-9);
        }
    }
}
