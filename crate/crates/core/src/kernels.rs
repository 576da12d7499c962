//! Inner numeric loops: matmul and im2col convolution.
//!
//! Every kernel has a sequential body; with the `parallel` feature the outer
//! loop runs on rayon over disjoint output slices, so results are bit-identical
//! to the sequential path regardless of scheduling.

use crate::tensor::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// out[m x n] = a[m x k] * b[k x n], accumulating from zeroed `out`.
pub fn matmul<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(row, a_row)| matmul_row(row, a_row, b, k, n));
    }
    #[cfg(not(feature = "parallel"))]
    matmul_seq(out, a, b, m, k, n);
}

/// Sequential reference matmul; the parallel path must match it bit for bit.
pub fn matmul_seq<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for (row, a_row) in out.chunks_mut(n).zip(a.chunks(k)).take(m) {
        matmul_row(row, a_row, b, k, n);
    }
}

#[inline]
fn matmul_row<T: Scalar>(row: &mut [T], a_row: &[T], b: &[T], k: usize, n: usize) {
    for p in 0..k {
        let av = a_row[p];
        let b_row = &b[p * n..p * n + n];
        for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
            *o = *o + av * bv;
        }
    }
}

/// out += a^T[k x m]^T... out[m x n] += a[k x m]^T * b[k x n].
pub fn matmul_at_b<T: Scalar>(out: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..p * m + m];
        let b_row = &b[p * n..p * n + n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..i * n + n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T.
pub fn matmul_a_bt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        let o_row = &mut out[i * n..i * n + n];
        for (o, b_row) in o_row.iter_mut().zip(b.chunks(k)) {
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// Output spatial size of a convolution axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Expand one image [C x H x W] into columns [(C*kh*kw) x (Ho*Wo)].
pub fn im2col<T: Scalar>(
    col: &mut [T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_len(h, kh, stride, padding);
    let wo = conv_out_len(w, kw, stride, padding);
    let cols = ho * wo;
    debug_assert_eq!(col.len(), c * kh * kw * cols);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into the image gradient.
pub fn col2im_add<T: Scalar>(
    dx: &mut [T],
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_len(h, kh, stride, padding);
    let wo = conv_out_len(w, kw, stride, padding);
    let cols = ho * wo;
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * cols..(row + 1) * cols];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = iy as usize * w + ix as usize;
                            plane[idx] = plane[idx] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv2d forward: x [B x Cin x H x W], k [Cout x Cin x kh x kw].
/// Writes out [B x Cout x Ho x Wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    out: &mut [T],
    x: &[T],
    kmat: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_len(h, kh, stride, padding);
    let wo = conv_out_len(w, kw, stride, padding);
    let cols = ho * wo;
    let krows = cin * kh * kw;
    let in_stride = cin * h * w;
    let out_stride = cout * cols;

    let body = |(out_s, x_s): (&mut [T], &[T])| {
        let mut col = vec![T::zero(); krows * cols];
        im2col(&mut col, x_s, cin, h, w, kh, kw, stride, padding);
        matmul_seq(out_s, kmat, &col, cout, krows, cols);
    };

    #[cfg(feature = "parallel")]
    out.par_chunks_mut(out_stride)
        .zip(x.par_chunks(in_stride))
        .take(b)
        .for_each(body);
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(out_stride)
        .zip(x.chunks(in_stride))
        .take(b)
        .for_each(body);
}

/// Batched conv2d backward. Accumulates into `dx` (B x Cin x H x W) and
/// `dk` (Cout x Cin x kh x kw) given `dy` (B x Cout x Ho x Wo).
/// Per-sample kernel gradients are reduced in batch order, so the result is
/// deterministic under the parallel feature.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dx: &mut [T],
    dk: &mut [T],
    dy: &[T],
    x: &[T],
    kmat: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_len(h, kh, stride, padding);
    let wo = conv_out_len(w, kw, stride, padding);
    let cols = ho * wo;
    let krows = cin * kh * kw;
    let in_stride = cin * h * w;
    let out_stride = cout * cols;

    let body = |((dx_s, x_s), dy_s): ((&mut [T], &[T]), &[T])| -> Vec<T> {
        let mut col = vec![T::zero(); krows * cols];
        im2col(&mut col, x_s, cin, h, w, kh, kw, stride, padding);
        // dK_s = dY_s * col^T
        let mut dk_s = vec![T::zero(); cout * krows];
        matmul_a_bt(&mut dk_s, dy_s, &col, cout, cols, krows);
        // dcol = K^T * dY_s
        let mut dcol = vec![T::zero(); krows * cols];
        matmul_at_b(&mut dcol, kmat, dy_s, cout, krows, cols);
        col2im_add(dx_s, &dcol, cin, h, w, kh, kw, stride, padding);
        dk_s
    };

    #[cfg(feature = "parallel")]
    let dks: Vec<Vec<T>> = dx
        .par_chunks_mut(in_stride)
        .zip(x.par_chunks(in_stride))
        .zip(dy.par_chunks(out_stride))
        .take(b)
        .map(body)
        .collect();
    #[cfg(not(feature = "parallel"))]
    let dks: Vec<Vec<T>> = dx
        .chunks_mut(in_stride)
        .zip(x.chunks(in_stride))
        .zip(dy.chunks(out_stride))
        .take(b)
        .map(body)
        .collect();

    for dk_s in dks {
        for (d, s) in dk.iter_mut().zip(dk_s.iter()) {
            *d = *d + *s;
        }
    }
}
