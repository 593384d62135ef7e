//! Dense kernels shared by the graph ops: GEMM on row-major slices and the
//! im2col / col2im pair used by 2-D convolution.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::Scalar;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. Inputs are row-major; a transposed operand is stored
/// in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    let a = if ta {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if tb {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[c, h, w]` image into `[c*k*k, oh*ow]` columns.
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let k = geom.kernel;
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(S::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // valid ox satisfy 0 <= ox - p + kx < w
                        let shift = kx as isize - p;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        out_row[..lo].fill(S::zero());
                        out_row[hi..].fill(S::zero());
                        let start = (lo as isize + shift) as usize;
                        out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let k = geom.kernel;
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let shift = kx as isize - p;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        let start = (lo as isize + shift) as usize;
                        dst_row[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&src_row[lo..hi])
                            .for_each(|(d, &v)| *d = *d + v);
                        continue;
                    }
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_match_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(false, false, 2, 4, 3, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T stored as 3x2, b^T stored as 4x3
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(true, true, 2, 4, 3, 1.0, &at, &bt, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for every geometry
        for geom in [
            ConvGeom { kernel: 3, stride: 1, pad: 1 },
            ConvGeom { kernel: 3, stride: 2, pad: 1 },
            ConvGeom { kernel: 4, stride: 2, pad: 1 },
        ] {
            let (c, h, w) = (2, 5, 6);
            let oh = geom.out_dim(h).unwrap();
            let ow = geom.out_dim(w).unwrap();
            let rows = c * geom.kernel * geom.kernel;
            let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let y: Vec<f64> = (0..rows * oh * ow).map(|i| ((i * 3) % 13) as f64 - 6.0).collect();
            let mut cols = vec![0.0; rows * oh * ow];
            im2col(&x, c, h, w, geom, oh, ow, &mut cols);
            let mut back = vec![0.0; c * h * w];
            col2im(&y, c, h, w, geom, oh, ow, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }
}
