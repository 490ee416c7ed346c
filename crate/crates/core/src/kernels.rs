//! Numeric kernels behind the graph ops: gemm, im2col convolution, pooling.
//!
//! All kernels are single-threaded and have a fixed reduction order, so the
//! same inputs always produce bit-identical outputs.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` / `b_t` read the row-major operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-d convolution over `[N, C, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.height + 2 * self.pad >= self.kernel_h
            && self.width + 2 * self.pad >= self.kernel_w
    }
}

/// im2col over the whole batch: `[patch_len, N * positions]`.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let np = g.batch * p;
    let mut cols = vec![0.0; g.patch_len() * np];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = n * p + oy * ow;
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an input-shaped buffer.
fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let np = g.batch * p;
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = n * p + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[iy as usize * g.width + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Output layout `[N, Co, Ho, Wo]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = im2col(x, g);
    let p = g.positions();
    let np = g.batch * p;
    let mut tmp = vec![0.0; g.out_channels * np];
    gemm(
        g.out_channels,
        g.patch_len(),
        np,
        w,
        false,
        &cols,
        false,
        0.0,
        &mut tmp,
    );
    // [Co, N, P] -> [N, Co, P]
    let mut out = vec![0.0; g.out_channels * np];
    for co in 0..g.out_channels {
        for n in 0..g.batch {
            out[(n * g.out_channels + co) * p..][..p]
                .copy_from_slice(&tmp[co * np + n * p..][..p]);
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.positions();
    let np = g.batch * p;
    let mut gmat = vec![0.0; g.out_channels * np];
    for co in 0..g.out_channels {
        for n in 0..g.batch {
            gmat[co * np + n * p..][..p]
                .copy_from_slice(&dout[(n * g.out_channels + co) * p..][..p]);
        }
    }
    let k = g.patch_len();
    let dw = if need_dw {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; g.out_channels * k];
        gemm(g.out_channels, np, k, &gmat, false, &cols, true, 0.0, &mut dw);
        Some(dw)
    } else {
        None
    };
    let dx = if need_dx {
        let mut dcols = vec![0.0; k * np];
        gemm(k, g.out_channels, np, w, true, &gmat, false, 0.0, &mut dcols);
        let mut dx = vec![0.0; x.len()];
        col2im(&dcols, g, &mut dx);
        Some(dx)
    } else {
        None
    };
    (dx, dw)
}

/// Non-overlapping `size x size` average pooling over `[N, C, H, W]`.
pub fn mean_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..][..h * w];
        let dst = &mut out[pl * oh * ow..][..oh * ow];
        for y in 0..h {
            let oy = y / size;
            for xx in 0..w {
                dst[oy * ow + xx / size] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= norm;
        }
    }
    out
}

pub fn mean_pool_backward(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let src = &dout[pl * oh * ow..][..oh * ow];
        let dst = &mut dx[pl * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / size) * ow + xx / size] * norm;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.height as isize
                                        || ix >= g.width as isize
                                    {
                                        continue;
                                    }
                                    s += x[((n * g.in_channels + ci) * g.height + iy as usize)
                                        * g.width
                                        + ix as usize]
                                        * w[((co * g.in_channels + ci) * g.kernel_h + ky)
                                            * g.kernel_w
                                            + kx];
                                }
                            }
                        }
                        out[((n * g.out_channels + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 0)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 2,
                height: 6,
                width: 6,
                out_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 2 * 36).map(|i| (i as f64 * 0.13).sin()).collect();
            let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.71).cos()).collect();
            let got = conv2d_forward(&x, &w, &g);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 2 * 20).map(|i| (i as f64 * 0.3).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut aty = vec![0.0; x.len()];
        col2im(&y, &g, &mut aty);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_averages_blocks() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = mean_pool_forward(&x, 1, 4, 4, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        let dx = mean_pool_backward(&[4.0, 0.0, 0.0, 0.0], 1, 4, 4, 2);
        assert_eq!(dx[0], 1.0);
        assert_eq!(dx[5], 1.0);
        assert_eq!(dx[2], 0.0);
    }
}
