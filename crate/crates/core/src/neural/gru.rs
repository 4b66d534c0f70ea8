//! Gated recurrent unit.
//!
//! With `xw = x W + b` split into update, reset and candidate parts:
//!
//! ```text
//! z  = sigmoid(xw_z + h U_z)
//! r  = sigmoid(xw_r + h U_r)
//! h~ = tanh(xw_h + (r * h) U_h)
//! h' = (1 - z) * h + z * h~
//! ```

use super::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    x: Tensor<T>,
    reverse: bool,
    return_sequences: bool,
    /// Per processing step: previous state, z, r, candidate, r * h.
    steps: Vec<[Vec<T>; 5]>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Splits `U` (`units × 3·units`) into the `z,r` block and the candidate block.
fn split_recurrent<T: Scalar>(u: &Tensor<T>, units: usize) -> (Vec<T>, Vec<T>) {
    let mut zr = Vec::with_capacity(units * 2 * units);
    let mut h = Vec::with_capacity(units * units);
    for row in u.data().chunks_exact(3 * units) {
        zr.extend_from_slice(&row[..2 * units]);
        h.extend_from_slice(&row[2 * units..]);
    }
    (zr, h)
}

/// One step; `xw` holds the three input projections (bias included).
pub fn gru_cell<T: Scalar>(xw: &[T], h_prev: &[T], u: &Tensor<T>) -> Vec<T> {
    let units = h_prev.len();
    let (uzr, uh) = split_recurrent(u, units);
    step(xw, h_prev, &uzr, &uh, 1, units)[0].clone()
}

/// Returns `[h_new, z, r, candidate, r*h]` for a batch of `b` rows.
fn step<T: Scalar>(xw: &[T], h: &[T], uzr: &[T], uh: &[T], b: usize, units: usize) -> [Vec<T>; 5] {
    let mut hzr = vec![T::zero(); b * 2 * units];
    T::gemm(b, units, 2 * units, T::one(), h, false, uzr, false, T::zero(), &mut hzr);
    let mut z = vec![T::zero(); b * units];
    let mut r = vec![T::zero(); b * units];
    for i in 0..b {
        for j in 0..units {
            z[i * units + j] = sigmoid(xw[i * 3 * units + j] + hzr[i * 2 * units + j]);
            r[i * units + j] = sigmoid(xw[i * 3 * units + units + j] + hzr[i * 2 * units + units + j]);
        }
    }
    let rh: Vec<T> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
    let mut c = vec![T::zero(); b * units];
    T::gemm(b, units, units, T::one(), &rh, false, uh, false, T::zero(), &mut c);
    for i in 0..b {
        for j in 0..units {
            let v = &mut c[i * units + j];
            *v = (*v + xw[i * 3 * units + 2 * units + j]).tanh();
        }
    }
    let hn: Vec<T> = (0..b * units).map(|k| (T::one() - z[k]) * h[k] + z[k] * c[k]).collect();
    [hn, z, r, c, rh]
}

pub(crate) fn gru_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
    bias: &Tensor<T>,
    reverse: bool,
    return_sequences: bool,
) -> (Tensor<T>, GruCache<T>) {
    let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let units = u.shape()[0];
    let g3 = 3 * units;
    let mut xw = vec![T::zero(); b * t * g3];
    for row in xw.chunks_exact_mut(g3) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(b * t, f, g3, T::one(), x.data(), false, w.data(), false, T::one(), &mut xw);
    let (uzr, uh) = split_recurrent(u, units);

    let mut h = vec![T::zero(); b * units];
    let mut steps = Vec::with_capacity(t);
    let mut out = if return_sequences {
        Tensor::zeros(&[b, t, units])
    } else {
        Tensor::zeros(&[b, units])
    };
    let mut xw_t = vec![T::zero(); b * g3];
    for s in 0..t {
        let ti = if reverse { t - 1 - s } else { s };
        for bi in 0..b {
            xw_t[bi * g3..(bi + 1) * g3].copy_from_slice(&xw[(bi * t + ti) * g3..(bi * t + ti + 1) * g3]);
        }
        let [hn, z, r, c, rh] = step(&xw_t, &h, &uzr, &uh, b, units);
        if return_sequences {
            for bi in 0..b {
                out.data_mut()[(bi * t + ti) * units..(bi * t + ti + 1) * units].copy_from_slice(&hn[bi * units..(bi + 1) * units]);
            }
        }
        let prev = std::mem::replace(&mut h, hn);
        steps.push([prev, z, r, c, rh]);
    }
    if !return_sequences {
        out.data_mut().copy_from_slice(&h);
    }
    (
        out,
        GruCache {
            x: x.clone(),
            reverse,
            return_sequences,
            steps,
        },
    )
}

/// Backpropagation through time. Returns `dx` and `[dW, dU, db]`.
pub(crate) fn gru_backward<T: Scalar>(w: &Tensor<T>, u: &Tensor<T>, cache: &GruCache<T>, g: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let x = &cache.x;
    let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let units = u.shape()[0];
    let g3 = 3 * units;
    let (uzr, uh) = split_recurrent(u, units);

    let mut dxw = vec![T::zero(); b * t * g3];
    let mut duzr = vec![T::zero(); units * 2 * units];
    let mut duh = vec![T::zero(); units * units];
    let mut dh = vec![T::zero(); b * units];
    let one = T::one();
    for s in (0..t).rev() {
        let ti = if cache.reverse { t - 1 - s } else { s };
        if cache.return_sequences {
            for bi in 0..b {
                for j in 0..units {
                    dh[bi * units + j] += g.data()[(bi * t + ti) * units + j];
                }
            }
        } else if s == t - 1 {
            dh.iter_mut().zip(g.data()).for_each(|(d, &v)| *d += v);
        }
        let [hp, z, r, c, rh] = &cache.steps[s];
        let n = b * units;
        let mut dhp: Vec<T> = (0..n).map(|k| dh[k] * (one - z[k])).collect();
        let dc_pre: Vec<T> = (0..n).map(|k| dh[k] * z[k] * (one - c[k] * c[k])).collect();
        T::gemm(units, b, units, one, rh, true, &dc_pre, false, one, &mut duh);
        let mut drh = vec![T::zero(); n];
        T::gemm(b, units, units, one, &dc_pre, false, &uh, true, T::zero(), &mut drh);
        let mut dzr = vec![T::zero(); b * 2 * units];
        for bi in 0..b {
            for j in 0..units {
                let k = bi * units + j;
                dhp[k] += drh[k] * r[k];
                let dz = dh[k] * (c[k] - hp[k]);
                let dr = drh[k] * hp[k];
                dzr[bi * 2 * units + j] = dz * z[k] * (one - z[k]);
                dzr[bi * 2 * units + units + j] = dr * r[k] * (one - r[k]);
            }
        }
        T::gemm(units, b, 2 * units, one, hp, true, &dzr, false, one, &mut duzr);
        T::gemm(b, 2 * units, units, one, &dzr, false, &uzr, true, one, &mut dhp);
        for bi in 0..b {
            let row = &mut dxw[(bi * t + ti) * g3..(bi * t + ti + 1) * g3];
            row[..2 * units].copy_from_slice(&dzr[bi * 2 * units..(bi + 1) * 2 * units]);
            row[2 * units..].copy_from_slice(&dc_pre[bi * units..(bi + 1) * units]);
        }
        dh = dhp;
    }

    let mut dw = Tensor::zeros(w.shape());
    T::gemm(f, b * t, g3, one, x.data(), true, &dxw, false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[g3]);
    for row in dxw.chunks_exact(g3) {
        db.data_mut().iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(b * t, g3, f, one, &dxw, false, w.data(), true, T::zero(), dx.data_mut());
    let mut du = Tensor::zeros(u.shape());
    for (i, row) in du.data_mut().chunks_exact_mut(g3).enumerate() {
        row[..2 * units].copy_from_slice(&duzr[i * 2 * units..(i + 1) * 2 * units]);
        row[2 * units..].copy_from_slice(&duh[i * units..(i + 1) * units]);
    }
    (dx, vec![dw, du, db])
}

pub(crate) fn bidirectional_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &[Tensor<T>],
    return_sequences: bool,
) -> (Tensor<T>, GruCache<T>, GruCache<T>) {
    let ((yf, cf), (yb, cb)) = rayon::join(
        || gru_forward(x, &params[0], &params[1], &params[2], false, return_sequences),
        || gru_forward(x, &params[3], &params[4], &params[5], true, return_sequences),
    );
    let units = params[1].shape()[0];
    let rows = yf.len() / units;
    let mut shape = yf.shape().to_vec();
    *shape.last_mut().unwrap() = 2 * units;
    let mut y = Tensor::zeros(&shape);
    for i in 0..rows {
        let dst = &mut y.data_mut()[i * 2 * units..(i + 1) * 2 * units];
        dst[..units].copy_from_slice(&yf.data()[i * units..(i + 1) * units]);
        dst[units..].copy_from_slice(&yb.data()[i * units..(i + 1) * units]);
    }
    (y, cf, cb)
}

pub(crate) fn bidirectional_backward<T: Scalar>(
    params: &[Tensor<T>],
    cf: &GruCache<T>,
    cb: &GruCache<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let units = params[1].shape()[0];
    let rows = g.len() / (2 * units);
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = units;
    let mut gf = Tensor::zeros(&shape);
    let mut gb = Tensor::zeros(&shape);
    for i in 0..rows {
        let src = &g.data()[i * 2 * units..(i + 1) * 2 * units];
        gf.data_mut()[i * units..(i + 1) * units].copy_from_slice(&src[..units]);
        gb.data_mut()[i * units..(i + 1) * units].copy_from_slice(&src[units..]);
    }
    let ((mut dx, mut grads), (dxb, gradsb)) = rayon::join(
        || gru_backward(&params[0], &params[1], cf, &gf),
        || gru_backward(&params[3], &params[4], cb, &gb),
    );
    dx.data_mut().iter_mut().zip(dxb.data()).for_each(|(a, &b)| *a += b);
    grads.extend(gradsb);
    (dx, grads)
}
