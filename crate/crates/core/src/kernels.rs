//! Cache-blocked matrix multiplication and the im2col lowering used by conv2d.
//!
//! All matrices are row-major. Two GEMM shapes cover every product the
//! autodiff ops need without materialising transposes:
//!
//! * [`gemm_xn`]: `C += op(A) · B` with `B` row-major `[k × n]`; the inner
//!   loop is an axpy over a row of `B`, so it vectorises without reordering
//!   any reduction.
//! * [`gemm_nt`]: `C += A · Bᵀ` with both operands row-major over `k`; the
//!   inner loop is a dot product with eight independent partial sums.

use crate::real::Real;

/// Column block: keeps a strip of four `C` rows plus one `B` row in L1/L2.
const NC: usize = 1024;
/// Depth block for the axpy kernel.
const KC: usize = 128;

/// `C[m×n] = (accumulate ? C : 0) + op(A)·B`.
///
/// `op(A)` is `A[m×k]` when `trans_a` is false, otherwise `A` is stored as
/// `[k×m]` and read transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm_xn<T: Real>(trans_a: bool, m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::ZERO);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_at = |i: usize, p: usize| -> T {
        if trans_a {
            a[p * m + i]
        } else {
            a[i * k + p]
        }
    };

    for j0 in (0..n).step_by(NC) {
        let j1 = (j0 + NC).min(n);
        let width = j1 - j0;
        for p0 in (0..k).step_by(KC) {
            let p1 = (p0 + KC).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let (r0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                let (r0, r1, r2, r3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                for p in p0..p1 {
                    let brow = &b[p * n + j0..p * n + j1];
                    let (a0, a1, a2, a3) = (a_at(i, p), a_at(i + 1, p), a_at(i + 2, p), a_at(i + 3, p));
                    for j in 0..width {
                        let bv = brow[j];
                        r0[j] += a0 * bv;
                        r1[j] += a1 * bv;
                        r2[j] += a2 * bv;
                        r3[j] += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let row = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let av = a_at(i, p);
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
                i += 1;
            }
        }
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::ZERO;
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `C[m×n] = (accumulate ? C : 0) + A[m×k] · B[n×k]ᵀ`.
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // Tile so a block of B rows stays hot while A rows stream past.
    const TJ: usize = 16;
    for j0 in (0..n).step_by(TJ) {
        let j1 = (j0 + TJ).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in j0..j1 {
                let v = dot(arow, &b[j * k..(j + 1) * k]);
                let cv = &mut c[i * n + j];
                *cv = if accumulate { *cv + v } else { v };
            }
        }
    }
}

/// Convolution geometry for one `[C, H, W]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// top, bottom, left, right
    pub pad: [usize; 4],
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + self.pad[0] + self.pad[1] - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + self.pad[2] + self.pad[3] - self.kernel.1) / self.stride.1 + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unrolls receptive fields into `cols[(c·kh + i)·kw + j, oh·Wo + ow]`.
pub fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    debug_assert_eq!(cols.len(), g.col_rows() * n);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * sh + ki) as isize - g.pad[0] as isize;
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih as usize >= g.height {
                        out.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * sw + kj) as isize - g.pad[2] as isize;
                        *o = if iw < 0 || iw as usize >= g.width {
                            T::ZERO
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * sh + ki) as isize - g.pad[0] as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = (ow * sw + kj) as isize - g.pad[2] as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn seq(len: usize, mul: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 101) as f64 - 50.0) * mul).collect()
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (5, 7, 3), (9, 1100, 130), (4, 3, 300), (13, 17, 19)] {
            let a = seq(m * k, 0.01);
            let b = seq(k * n, 0.02);
            let expect = naive(m, n, k, &a, &b);

            let mut c = vec![1.0; m * n];
            gemm_xn(false, m, n, k, &a, &b, &mut c, false);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }

            let at = transpose(m, k, &a);
            gemm_xn(true, m, n, k, &at, &b, &mut c, false);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }

            let bt = transpose(k, n, &b);
            let mut c2 = vec![0.5; m * n];
            gemm_nt(m, n, k, &a, &bt, &mut c2, true);
            for (x, y) in c2.iter().zip(&expect) {
                assert!((x - (y + 0.5)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 6,
            kernel: (3, 2),
            stride: (2, 1),
            pad: [1, 0, 1, 1],
        };
        let x = seq(2 * 5 * 6, 0.1);
        let y = seq(g.col_rows() * g.col_cols(), 0.03);
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
