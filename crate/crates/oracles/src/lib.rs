//! Reference implementations written straight from the definitions, on plain
//! slices so they share no code with the library they check.

fn idx5(s: &[usize; 5], a: usize, b: usize, z: usize, y: usize, x: usize) -> usize {
    (((a * s[1] + b) * s[2] + z) * s[3] + y) * s[4] + x
}

/// Forward output and the gradients of `<out, upstream>`.
pub struct Conv3d {
    pub shape: [usize; 5],
    pub out: Vec<f64>,
    pub gx: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
}

/// Cross-correlation with zero padding. `x` is `(N, C, D, H, W)`, `w` is `(O, C, kd, kh, kw)`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: usize,
    pad: usize,
    upstream: &[f64],
) -> Conv3d {
    let o = |len: usize, k: usize| (len + 2 * pad - k) / stride + 1;
    let os = [
        xs[0],
        ws[0],
        o(xs[2], ws[2]),
        o(xs[3], ws[3]),
        o(xs[4], ws[4]),
    ];
    let mut out = vec![0.0; os.iter().product()];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; ws[0]];
    for n in 0..os[0] {
        for oc in 0..os[1] {
            for oz in 0..os[2] {
                for oy in 0..os[3] {
                    for ox in 0..os[4] {
                        let oi = idx5(&os, n, oc, oz, oy, ox);
                        let up = upstream[oi];
                        let mut acc = b[oc];
                        gb[oc] += up;
                        for ic in 0..xs[1] {
                            for kz in 0..ws[2] {
                                for ky in 0..ws[3] {
                                    for kx in 0..ws[4] {
                                        let iz = (oz * stride + kz) as i64 - pad as i64;
                                        let iy = (oy * stride + ky) as i64 - pad as i64;
                                        let ix = (ox * stride + kx) as i64 - pad as i64;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= xs[2] as i64
                                            || iy >= xs[3] as i64
                                            || ix >= xs[4] as i64
                                        {
                                            continue;
                                        }
                                        let xi =
                                            idx5(&xs, n, ic, iz as usize, iy as usize, ix as usize);
                                        let wi = idx5(&ws, oc, ic, kz, ky, kx);
                                        acc += x[xi] * w[wi];
                                        gx[xi] += w[wi] * up;
                                        gw[wi] += x[xi] * up;
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                    }
                }
            }
        }
    }
    Conv3d {
        shape: os,
        out,
        gx,
        gw,
        gb,
    }
}

/// Window maximum (first occurrence wins ties) and the gradient of `<out, upstream>`.
pub fn maxpool3d(
    x: &[f64],
    xs: [usize; 5],
    window: usize,
    stride: usize,
    upstream: &[f64],
) -> ([usize; 5], Vec<f64>, Vec<f64>) {
    let o = |len: usize| (len - window) / stride + 1;
    let os = [xs[0], xs[1], o(xs[2]), o(xs[3]), o(xs[4])];
    let mut out = Vec::new();
    let mut gx = vec![0.0; x.len()];
    for n in 0..os[0] {
        for c in 0..os[1] {
            for oz in 0..os[2] {
                for oy in 0..os[3] {
                    for ox in 0..os[4] {
                        let mut best: Option<(f64, usize)> = None;
                        for kz in 0..window {
                            for ky in 0..window {
                                for kx in 0..window {
                                    let i = idx5(
                                        &xs,
                                        n,
                                        c,
                                        oz * stride + kz,
                                        oy * stride + ky,
                                        ox * stride + kx,
                                    );
                                    if best.is_none_or(|(v, _)| x[i] > v) {
                                        best = Some((x[i], i));
                                    }
                                }
                            }
                        }
                        let (v, i) = best.expect("window is non-empty");
                        gx[i] += upstream[out.len()];
                        out.push(v);
                    }
                }
            }
        }
    }
    (os, out, gx)
}

/// Align-corners sampling weights of output voxel `o` as `(flat source index, weight)`.
pub fn trilinear_weights(src: [usize; 3], dst: [usize; 3], o: [usize; 3]) -> Vec<(usize, f64)> {
    let axis = |a: usize| -> [(usize, f64); 2] {
        let pos = if dst[a] == 1 || src[a] == 1 {
            0.0
        } else {
            o[a] as f64 * (src[a] - 1) as f64 / (dst[a] - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src[a] - 1);
        let hi = (lo + 1).min(src[a] - 1);
        let f = pos - lo as f64;
        [(lo, 1.0 - f), (hi, f)]
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(8);
    for &(z, wz) in &az {
        for &(y, wy) in &ay {
            for &(x, wx) in &ax {
                out.push(((z * src[1] + y) * src[2] + x, wz * wy * wx));
            }
        }
    }
    out
}

/// Resizes `blocks` consecutive volumes of dims `src` to `dst`; returns the
/// output and the gradient of `<out, upstream>`.
pub fn trilinear(
    x: &[f64],
    blocks: usize,
    src: [usize; 3],
    dst: [usize; 3],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (sp, dp) = (src.iter().product::<usize>(), dst.iter().product::<usize>());
    let mut out = Vec::with_capacity(blocks * dp);
    let mut gx = vec![0.0; x.len()];
    for block in 0..blocks {
        for z in 0..dst[0] {
            for y in 0..dst[1] {
                for xx in 0..dst[2] {
                    let oi = block * dp + (z * dst[1] + y) * dst[2] + xx;
                    let mut v = 0.0;
                    for (si, wgt) in trilinear_weights(src, dst, [z, y, xx]) {
                        v += wgt * x[block * sp + si];
                        gx[block * sp + si] += wgt * upstream[oi];
                    }
                    out.push(v);
                }
            }
        }
    }
    (out, gx)
}

/// A component found by flood fill: label, area and `[min_row, min_col, max_row, max_col]`.
pub type Component = (u32, usize, [usize; 4]);

/// 8-connected labeling by recursive flood fill, labels assigned in raster order of first pixel.
pub fn flood_fill_components(bits: &[u8], h: usize, w: usize) -> (Vec<u32>, Vec<Component>) {
    #[allow(clippy::too_many_arguments)]
    fn flood(
        bits: &[u8],
        h: usize,
        w: usize,
        map: &mut [u32],
        r: usize,
        c: usize,
        label: u32,
        area: &mut usize,
        bb: &mut [usize; 4],
    ) {
        if bits[r * w + c] == 0 || map[r * w + c] != 0 {
            return;
        }
        map[r * w + c] = label;
        *area += 1;
        *bb = [bb[0].min(r), bb[1].min(c), bb[2].max(r), bb[3].max(c)];
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    flood(bits, h, w, map, rr as usize, cc as usize, label, area, bb);
                }
            }
        }
    }
    let mut map = vec![0u32; h * w];
    let mut objects = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if bits[r * w + c] != 0 && map[r * w + c] == 0 {
                let label = objects.len() as u32 + 1;
                let (mut area, mut bb) = (0, [r, c, r, c]);
                flood(bits, h, w, &mut map, r, c, label, &mut area, &mut bb);
                objects.push((label, area, bb));
            }
        }
    }
    (map, objects)
}

/// Square max filter of half-width `radius`, clipped at the borders.
pub fn max_filter(bits: &[u8], h: usize, w: usize, radius: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            for rr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                    out[r * w + c] |= (bits[rr * w + cc] != 0) as u8;
                }
            }
        }
    }
    out
}

/// `[tp, fp, fn, tn]` of the region made of `members`, one voxel at a time.
pub fn tally(pred: &[u8], truth: &[u8], members: &[u8]) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (p, t) in pred.iter().zip(truth) {
        let slot = match (members.contains(p), members.contains(t)) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[slot] += 1;
    }
    c
}

/// Bias-corrected Adam on one scalar with the usual constants.
#[derive(Debug, Default)]
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        p - lr * mh / (vh.sqrt() + 1e-8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv_copies_input() {
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let r = conv3d(
            &x,
            [1, 1, 2, 2, 2],
            &[1.0],
            [1, 1, 1, 1, 1],
            &[0.0],
            1,
            0,
            &[0.0; 8],
        );
        assert_eq!(r.out, x);
    }

    #[test]
    fn two_diagonal_pixels_are_one_component() {
        let (_, objs) = flood_fill_components(&[1, 0, 0, 1], 2, 2);
        assert_eq!(objs, vec![(1, 2, [0, 0, 1, 1])]);
    }

    #[test]
    fn tally_counts_every_voxel_once() {
        assert_eq!(tally(&[1, 0, 1, 0], &[1, 1, 0, 0], &[1]), [1, 1, 1, 1]);
    }
}
