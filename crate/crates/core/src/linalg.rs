//! Dense kernels shared by the graph ops: GEMM and the im2col lowering.

/// Shape bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(batch: usize, in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Self { batch, in_c, in_h, in_w, out_c, kernel, stride, pad, out_h, out_w }
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Rows of the lowered matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Columns of the lowered matrix: one per (sample, oy, ox).
    pub fn cols_width(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// `c = beta * c + a·b` with `a: m×k`, `b: k×n`, `c: m×n`, each given as
/// (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
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
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, p, l) = (g.kernel, g.out_plane(), g.cols_width());
    let mut cols = vec![0.0; g.patch_len() * l];
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * l..(row + 1) * l];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * g.out_w + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, p, l) = (g.kernel, g.out_plane(), g.cols_width());
    let mut x = vec![0.0; g.batch * g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * l..(row + 1) * l];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [1.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c, (2, 1), 1.0);
        assert_eq!(c, [20.0, 23.0, 44.0, 51.0]);
        // a^T b
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, (2, 1), 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new(2, 3, 5, 4, 1, 3, 2, 1);
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.cols_width()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
