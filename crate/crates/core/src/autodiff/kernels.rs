//! Forward and backward kernels for the 3D primitives, over `(N, C, D, H, W)` buffers.

use crate::tensor::{Scalar, ShapeError, Strided, StridedMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, ShapeError> {
        let (&[n, c, d, h, w], &[oc, ic, kd, kh, kw]) = (x_shape, w_shape) else {
            return Err(ShapeError::Incompatible {
                op: "conv3d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        };
        if c != ic {
            return Err(ShapeError::Incompatible {
                op: "conv3d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(ShapeError::Invalid {
                op: "conv3d",
                reason: "stride must be at least 1".into(),
            });
        }
        let out = |len: usize, k: usize| -> Result<usize, ShapeError> {
            let padded = len + 2 * padding;
            if k == 0 || k > padded {
                return Err(ShapeError::Invalid {
                    op: "conv3d",
                    reason: format!("kernel extent {k} does not fit padded input {padded}"),
                });
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            batch: n,
            in_channels: c,
            out_channels: oc,
            in_dims: [d, h, w],
            kernel: [kd, kh, kw],
            stride,
            padding,
            out_dims: [out(d, kd)?, out(h, kh)?, out(w, kw)?],
        })
    }

    pub fn out_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.out_dims;
        [self.batch, self.out_channels, d, h, w]
    }

    fn in_plane(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `k`, if inside the input.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.padding)?;
        (pos < len).then_some(pos)
    }

    /// Output x-range `[lo, hi)` whose reads at tap `kx` stay inside the input row (stride 1 only).
    #[inline]
    fn unit_stride_span(&self, kx: usize) -> (usize, usize) {
        let w = self.in_dims[2];
        let lo = self.padding.saturating_sub(kx);
        let hi = (w + self.padding).saturating_sub(kx).min(self.out_dims[2]);
        (lo, hi.max(lo))
    }
}

/// Upper bound on elements of one im2col buffer; larger outputs are processed in z-slabs.
const COLS_BUDGET: usize = 1 << 22;

impl ConvGeometry {
    fn taps(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    /// Output z-planes per slab so that one column buffer stays within budget.
    fn slab_planes(&self) -> usize {
        let [_, oh, ow] = self.out_dims;
        (COLS_BUDGET / (self.taps() * oh * ow).max(1)).clamp(1, self.out_dims[0].max(1))
    }
}

/// Calls `f(col_offset, in_offset, len)` for each contiguous run of output
/// columns in slab `[oz0, oz1)` that reads input at kernel tap `(kz, ky, kx)`.
/// For strided convolutions each run is a single element.
#[inline]
fn for_each_run(
    g: &ConvGeometry,
    (kz, ky, kx): (usize, usize, usize),
    (oz0, oz1): (usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    let [d, h, w] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let (lo, hi) = if g.stride == 1 {
        g.unit_stride_span(kx)
    } else {
        (0, ow)
    };
    if lo >= hi {
        return;
    }
    for oz in oz0..oz1 {
        let Some(iz) = g.source(oz, kz, d) else {
            continue;
        };
        for oy in 0..oh {
            let Some(iy) = g.source(oy, ky, h) else {
                continue;
            };
            let col_row = ((oz - oz0) * oh + oy) * ow;
            let in_row = (iz * h + iy) * w;
            if g.stride == 1 {
                f(col_row + lo, in_row + lo + kx - g.padding, hi - lo);
            } else {
                for ox in lo..hi {
                    if let Some(ix) = g.source(ox, kx, w) {
                        f(col_row + ox, in_row + ix, 1);
                    }
                }
            }
        }
    }
}

fn tap_coords(g: &ConvGeometry, t: usize) -> (usize, usize, usize) {
    let [_, kh, kw] = g.kernel;
    (t / (kh * kw), (t / kw) % kh, t % kw)
}

/// Column matrix `(in_channels·kernel_volume) × slab_columns` of one sample's input.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, slab: (usize, usize), cols: &mut [T]) {
    let ip = g.in_plane();
    let kv = g.kernel_volume();
    let ncols = (slab.1 - slab.0) * g.out_dims[1] * g.out_dims[2];
    cols[..g.taps() * ncols].fill(T::zero());
    for ic in 0..g.in_channels {
        let src = &x[ic * ip..][..ip];
        for t in 0..kv {
            let row = &mut cols[(ic * kv + t) * ncols..][..ncols];
            for_each_run(g, tap_coords(g, t), slab, |c, i, len| {
                row[c..c + len].copy_from_slice(&src[i..i + len]);
            });
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix into one sample's input gradient.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, slab: (usize, usize), gx: &mut [T]) {
    let ip = g.in_plane();
    let kv = g.kernel_volume();
    let ncols = (slab.1 - slab.0) * g.out_dims[1] * g.out_dims[2];
    for ic in 0..g.in_channels {
        let dst = &mut gx[ic * ip..][..ip];
        for t in 0..kv {
            let row = &cols[(ic * kv + t) * ncols..][..ncols];
            for_each_run(g, tap_coords(g, t), slab, |c, i, len| {
                for (d, &v) in dst[i..i + len].iter_mut().zip(&row[c..c + len]) {
                    *d += v;
                }
            });
        }
    }
}

fn slabs(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let od = g.out_dims[0];
    let step = g.slab_planes();
    (0..od).step_by(step).map(move |z| (z, (z + step).min(od)))
}

/// Cross-correlation of `x (N, C, D, H, W)` with `w (O, C, kd, kh, kw)`, plus optional bias.
pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let plane_cols = g.out_dims[1] * g.out_dims[2];
    let k = g.taps();
    let mut out = vec![T::zero(); g.batch * g.out_channels * op];
    let mut cols = vec![T::zero(); k * g.slab_planes() * plane_cols];
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * ip..][..g.in_channels * ip];
        let on = &mut out[n * g.out_channels * op..][..g.out_channels * op];
        if let Some(b) = b {
            for (plane, &bv) in on.chunks_exact_mut(op).zip(b) {
                plane.fill(bv);
            }
        }
        for slab in slabs(g) {
            let ncols = (slab.1 - slab.0) * plane_cols;
            im2col(xn, g, slab, &mut cols);
            T::gemm(
                g.out_channels,
                k,
                ncols,
                Strided {
                    data: w,
                    rs: k,
                    cs: 1,
                },
                Strided {
                    data: &cols,
                    rs: ncols,
                    cs: 1,
                },
                T::one(),
                StridedMut {
                    data: &mut on[slab.0 * plane_cols..],
                    rs: op,
                    cs: 1,
                },
            );
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    want_x: bool,
) -> ConvGrads<T> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let plane_cols = g.out_dims[1] * g.out_dims[2];
    let k = g.taps();
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.out_channels];
    let cap = k * g.slab_planes() * plane_cols;
    let mut cols = vec![T::zero(); cap];
    let mut dcols = if want_x {
        vec![T::zero(); cap]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * ip..][..g.in_channels * ip];
        let gon = &grad_out[n * g.out_channels * op..][..g.out_channels * op];
        for (acc, plane) in gb.iter_mut().zip(gon.chunks_exact(op)) {
            *acc += plane.iter().copied().sum::<T>();
        }
        for slab in slabs(g) {
            let ncols = (slab.1 - slab.0) * plane_cols;
            let go = Strided {
                data: &gon[slab.0 * plane_cols..],
                rs: op,
                cs: 1,
            };
            im2col(xn, g, slab, &mut cols);
            // dW += dOut · colsᵀ
            T::gemm(
                g.out_channels,
                ncols,
                k,
                go,
                Strided {
                    data: &cols,
                    rs: 1,
                    cs: ncols,
                },
                T::one(),
                StridedMut {
                    data: &mut gw,
                    rs: k,
                    cs: 1,
                },
            );
            if let Some(gx) = gx.as_mut() {
                // dCols = Wᵀ · dOut
                T::gemm(
                    k,
                    g.out_channels,
                    ncols,
                    Strided {
                        data: w,
                        rs: 1,
                        cs: k,
                    },
                    go,
                    T::zero(),
                    StridedMut {
                        data: &mut dcols,
                        rs: ncols,
                        cs: 1,
                    },
                );
                col2im(
                    &dcols,
                    g,
                    slab,
                    &mut gx[n * g.in_channels * ip..][..g.in_channels * ip],
                );
            }
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        b: gb,
    }
}

/// Output extent of a pooling window along one axis.
pub fn pool_extent(len: usize, window: usize, stride: usize) -> Option<usize> {
    (window >= 1 && stride >= 1 && len >= window).then(|| (len - window) / stride + 1)
}

/// Max pooling; returns the pooled values and the flat input index of each window's maximum
/// (first index in z, y, x scan order on ties).
pub fn maxpool3d_forward<T: Scalar>(
    x: &[T],
    shape: [usize; 5],
    window: usize,
    stride: usize,
    out_dims: [usize; 3],
) -> (Vec<T>, Vec<usize>) {
    let [n, c, d, h, w] = shape;
    let [od, oh, ow] = out_dims;
    let plane = d * h * w;
    let mut values = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(values.capacity());
    for nc in 0..n * c {
        let base = nc * plane;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + ((oz * stride) * h + oy * stride) * w + ox * stride;
                    for kz in 0..window {
                        for ky in 0..window {
                            let row = base + ((oz * stride + kz) * h + oy * stride + ky) * w;
                            for kx in 0..window {
                                let idx = row + ox * stride + kx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    values.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (values, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_extent() {
        let g = ConvGeometry::new(&[1, 2, 9, 8, 7], &[3, 2, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.out_dims, [5, 4, 4]);
        assert_eq!(g.out_shape(), [1, 3, 5, 4, 4]);
    }

    #[test]
    fn geometry_rejects_channel_mismatch_and_oversized_kernel() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4, 4], &[3, 1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 4, 4], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 4, 4], &[1, 1, 3, 3, 3], 1, 1).is_ok());
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = vec![1.0f32; 8];
        let (v, arg) = maxpool3d_forward(&x, [1, 1, 2, 2, 2], 2, 2, [1, 1, 1]);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
