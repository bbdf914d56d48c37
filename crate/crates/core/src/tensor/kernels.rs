use rayon::prelude::*;

/// `c ← beta·c + a·b` for row-major operands, optionally transposed.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when
/// `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe exactly the
    // row-major layouts of the slices.
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

/// Geometry of one 2-D convolution window sweep.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    cols.par_chunks_mut(g.cols()).enumerate().for_each(|(row, out)| {
        let c = row / (k * k);
        let ki = ((row / k) % k) as isize;
        let kj = (row % k) as isize;
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for oi in 0..g.out_h {
            let i = oi as isize * s - p + ki;
            let dst = &mut out[oi * g.out_w..(oi + 1) * g.out_w];
            if i < 0 || i >= g.height as isize {
                dst.fill(0.0);
                continue;
            }
            let src = &plane[i as usize * g.width..(i as usize + 1) * g.width];
            for (oj, d) in dst.iter_mut().enumerate() {
                let j = oj as isize * s - p + kj;
                *d = if j < 0 || j >= g.width as isize { 0.0 } else { src[j as usize] };
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C, H, W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let hw = g.height * g.width;
    x.par_chunks_mut(hw).enumerate().for_each(|(c, plane)| {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oi in 0..g.out_h {
                    let i = oi as isize * s - p + ki as isize;
                    if i < 0 || i >= g.height as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let j = oj as isize * s - p + kj as isize;
                        if j >= 0 && j < g.width as isize {
                            plane[i as usize * g.width + j as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    });
}

/// Separable "valid" filtering of one `h × w` plane with `kernel ⊗ kernel`.
///
/// Output is `(h − k + 1) × (w − k + 1)`. Shared by the SSIM metric and the
/// differentiable DSSIM loss so both see identical arithmetic.
pub fn blur_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            let mut acc = 0.0;
            for t in 0..k {
                acc += kernel[t] * row[c + t];
            }
            tmp[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for t in 0..k {
                acc += kernel[t] * tmp[(r + t) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Adjoint of [`blur_valid`].
pub(crate) fn blur_valid_adjoint(grad: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..oh {
        for c in 0..ow {
            let g = grad[r * ow + c];
            for t in 0..k {
                tmp[(r + t) * ow + c] += kernel[t] * g;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..ow {
            let g = tmp[r * ow + c];
            for t in 0..k {
                out[r * w + c + t] += kernel[t] * g;
            }
        }
    }
    out
}
