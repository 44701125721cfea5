//! Separable align-corners trilinear resampling.
//!
//! Destination index `i` along an axis of `src` voxels maps to source
//! coordinate `i * (src - 1) / (dst - 1)`; single-voxel axes map to 0.
//! Resampling axis by axis (x, then y, then z) is algebraically the
//! 8-corner trilinear formula, and its transpose is the exact backward pass.

use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisMap {
    pub(crate) fn align_corners(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let coord = if dst == 1 || src == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let l = (coord.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(coord - l as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Resamples the middle axis of a `[outer, n, inner]` block to `m` entries.
fn resample_axis<T: Scalar>(src: &[T], outer: usize, n: usize, inner: usize, m: usize) -> Vec<T> {
    let map = AxisMap::align_corners(n, m);
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        let s = &src[o * n * inner..(o + 1) * n * inner];
        let d = &mut out[o * m * inner..(o + 1) * m * inner];
        for i in 0..m {
            let f = T::from_f64_lossy(map.frac[i]);
            let g = T::one() - f;
            let lo = &s[map.lo[i] * inner..(map.lo[i] + 1) * inner];
            let hi = &s[map.hi[i] * inner..(map.hi[i] + 1) * inner];
            let row = &mut d[i * inner..(i + 1) * inner];
            for ((r, &a), &b) in row.iter_mut().zip(lo).zip(hi) {
                *r = g * a + f * b;
            }
        }
    }
    out
}

/// Transpose of [`resample_axis`]: scatters `[outer, m, inner]` gradients back to `n` entries.
fn resample_axis_transpose<T: Scalar>(
    grad: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    m: usize,
) -> Vec<T> {
    let map = AxisMap::align_corners(n, m);
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let g_blk = &grad[o * m * inner..(o + 1) * m * inner];
        let d = &mut out[o * n * inner..(o + 1) * n * inner];
        for i in 0..m {
            let f = T::from_f64_lossy(map.frac[i]);
            let g = T::one() - f;
            let row = &g_blk[i * inner..(i + 1) * inner];
            let (lo, hi) = (map.lo[i], map.hi[i]);
            for (k, &v) in row.iter().enumerate() {
                d[lo * inner + k] += g * v;
            }
            for (k, &v) in row.iter().enumerate() {
                d[hi * inner + k] += f * v;
            }
        }
    }
    out
}

/// Resizes one `[d, h, w]` block (x fastest) to `dst` dims.
pub(crate) fn resize_block<T: Scalar>(
    src: &[T],
    src_dims: [usize; 3],
    dst_dims: [usize; 3],
) -> Vec<T> {
    let [d, h, w] = src_dims;
    let [dd, hh, ww] = dst_dims;
    let xs = resample_axis(src, d * h, w, 1, ww);
    let ys = resample_axis(&xs, d, h, ww, hh);
    resample_axis(&ys, 1, d, hh * ww, dd)
}

pub(crate) fn resize_block_backward<T: Scalar>(
    grad: &[T],
    src_dims: [usize; 3],
    dst_dims: [usize; 3],
) -> Vec<T> {
    let [d, h, w] = src_dims;
    let [dd, hh, ww] = dst_dims;
    let gz = resample_axis_transpose(grad, 1, d, hh * ww, dd);
    let gy = resample_axis_transpose(&gz, d, h, ww, hh);
    resample_axis_transpose(&gy, d * h, w, 1, ww)
}
