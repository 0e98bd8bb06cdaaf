//! GEMM and im2col helpers shared by matmul and convolution.

/// `c = a' * b' + beta * c` where `a'` is `m x k`, `b'` is `k x n`, and each
/// primed operand is optionally the transpose of the row-major buffer given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are asserted at the top.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }
}

/// Unfold input patches into a `rows x patch` matrix, patch order (ky, kx, c).
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let c = g.in_channels;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let off = (ky * g.kernel_w + kx) * c;
                        dst[off..off + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub(crate) fn col2im_add(dcols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let patch = g.patch();
    let c = g.in_channels;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_h + oy) * g.out_w + ox;
                let src = &dcols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let off = (ky * g.kernel_w + kx) * c;
                        for (d, s) in dx[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                            *d += *s;
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

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
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
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
