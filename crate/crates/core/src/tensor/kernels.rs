// Dense f64 kernels shared by the forward and adjoint passes.

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `ta` the buffer `a` holds `k x m`; with `tb` the buffer `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let at;
    let a = if ta {
        at = transpose(a, k, m);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if tb {
        bt = transpose(b, n, k);
        &bt[..]
    } else {
        b
    };
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Transposes a row-major `rows x cols` matrix.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `(cin, h, w)` image into `(cin*kh*kw, ho*wo)` patches.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Source index pair and weight of the second index for half-pixel
/// bilinear resizing along one axis.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpose_flags_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut plain = [0.0; 4];
        gemm(&a, &b, &mut plain, 2, 3, 2, false, false);
        assert_eq!(plain, [5.0, 11.0, 14.0, 23.0]);
        let mut flagged = [0.0; 4];
        gemm(&transpose(&a, 2, 3), &transpose(&b, 3, 2), &mut flagged, 2, 3, 2, true, true);
        assert_eq!(flagged, plain);
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        for (o, (i0, _, w)) in bilinear_taps(5, 5).into_iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(w, 0.0);
        }
    }
}
