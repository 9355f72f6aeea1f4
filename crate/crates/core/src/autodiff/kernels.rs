//! Dense kernels shared by the convolution ops: GEMM and the im2col/col2im
//! pair. `col2im` is the exact adjoint of `im2col` for the same geometry,
//! which is what makes transposed convolution and conv backward passes
//! fall out of the same two routines.

/// Geometry of a 2-D sliding window over one `(channels, height, width)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window2d {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window2d {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Maps output position + tap to an input coordinate, or `None` in the padding.
    #[inline]
    fn source(&self, oi: usize, ki: usize, oj: usize, kj: usize) -> Option<(usize, usize)> {
        let r = (oi * self.stride + ki).checked_sub(self.pad)?;
        let c = (oj * self.stride + kj).checked_sub(self.pad)?;
        (r < self.height && c < self.width).then_some((r, c))
    }
}

/// Unfolds `image` into a `(C*k*k) x (out_h*out_w)` column matrix.
pub(crate) fn im2col(image: &[f64], g: &Window2d, col: &mut [f64]) {
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let k = g.kernel;
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        dst[oi * g.out_w + oj] = match g.source(oi, ki, oj, kj) {
                            Some((r, cc)) => src[r * g.width + cc],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `image`.
pub(crate) fn col2im(col: &[f64], g: &Window2d, image: &mut [f64]) {
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    let k = g.kernel;
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        if let Some((r, cc)) = g.source(oi, ki, oj, kj) {
                            dst[r * g.width + cc] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major operand description for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Stored as the transpose of the logical matrix.
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn n(data: &'a [f64]) -> Self {
        Self { data, transposed: false }
    }

    pub fn t(data: &'a [f64]) -> Self {
        Self { data, transposed: true }
    }
}

/// `C (m x n) = A (m x k) * B (k x n)`, adding into `C` when `accumulate`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a.transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the checked slice lengths above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, bb) in [(Mat::n(&a), Mat::n(&b)), (Mat::t(&at), Mat::n(&b)), (Mat::n(&a), Mat::t(&bt)), (Mat::t(&at), Mat::t(&bt))] {
            let mut c = vec![1.0; m * n];
            gemm(m, k, n, aa, bb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window2d { channels: 2, height: 6, width: 6, kernel: 4, stride: 2, pad: 1, out_h: 3, out_w: 3 };
        let x: Vec<f64> = (0..72).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 5) % 13) as f64 * 0.1).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
