use rayon::prelude::*;

use super::{Scalar, Tensor};

/// Unfolds one `[C, H, W]` item into a `(C·9) × (H·W)` patch matrix with
/// zero padding of one pixel.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        row[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            x[ch * hw + sy as usize * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dx[ch * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let f = kernel.shape()[0];
    let hw = h * w;
    let mut y = Tensor::zeros(&[b, f, h, w]);
    y.data_mut()
        .par_chunks_mut(f * hw)
        .zip(x.data().par_chunks(c * hw))
        .for_each_init(
            || vec![T::zero(); c * 9 * hw],
            |cols, (out, item)| {
                im2col(item, c, h, w, cols);
                for (fi, row) in out.chunks_exact_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias.data()[fi]);
                }
                T::gemm(f, c * 9, hw, T::one(), kernel.data(), false, cols, false, T::one(), out);
            },
        );
    y
}

pub(crate) fn conv2d_backward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let f = kernel.shape()[0];
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    // Per-item kernel gradients, summed afterwards in batch order.
    let per_item: Vec<Vec<T>> = dx
        .data_mut()
        .par_chunks_mut(c * hw)
        .zip(x.data().par_chunks(c * hw))
        .zip(g.data().par_chunks(f * hw))
        .map(|((dx_item, item), g_item)| {
            let mut cols = vec![T::zero(); c * 9 * hw];
            im2col(item, c, h, w, &mut cols);
            let mut dk = vec![T::zero(); f * c * 9];
            T::gemm(f, hw, c * 9, T::one(), g_item, false, &cols, true, T::zero(), &mut dk);
            T::gemm(c * 9, f, hw, T::one(), kernel.data(), true, g_item, false, T::zero(), &mut cols);
            col2im(&cols, c, h, w, dx_item);
            dk
        })
        .collect();
    let mut dk = Tensor::zeros(kernel.shape());
    for part in &per_item {
        dk.data_mut().iter_mut().zip(part).for_each(|(a, &b)| *a += b);
    }
    let mut db = Tensor::zeros(&[f]);
    for g_item in g.data().chunks_exact(f * hw) {
        for (fi, row) in g_item.chunks_exact(hw).enumerate() {
            db.data_mut()[fi] += row.iter().copied().sum::<T>();
        }
    }
    (dx, vec![dk, db])
}

/// 2×2 stride-2 max-pool. Returns the output and, per output element, the
/// flat input index of its maximum (first occurrence on ties).
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.data_mut()[argmax.len()] = xd[best];
                argmax.push(best);
            }
        }
    }
    (y, argmax)
}

pub(crate) fn maxpool_backward<T: Scalar>(in_shape: &[usize], argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&i, &v) in argmax.iter().zip(g.data()) {
        dx.data_mut()[i] += v;
    }
    dx
}
