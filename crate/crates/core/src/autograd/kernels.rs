//! Raw CPU kernels shared by the tape ops. Everything here works on flat
//! row-major slices; shape bookkeeping lives in the caller.

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer, without copying.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out = a · b + beta · out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], out_stride: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_offset() < a.data.len().max(1));
    assert!(b.max_offset() < b.data.len().max(1));
    assert!((m - 1) * out_stride + n <= out.len());
    if k == 0 {
        for r in 0..m {
            for v in &mut out[r * out_stride..r * out_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `out` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (out_h·out_w)` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.in_channels {
        let plane = &mut grad_input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Windowed max over each channel plane; records the flat input index of the
/// winner. Ties go to the first (row-major earliest) position.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward(
    input: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (out_h, out_w): (usize, usize),
    out: &mut [f64],
    argmax: &mut [usize],
) {
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * sh * w + ox * sw;
                for ky in 0..kh {
                    let row = base + (oy * sh + ky) * w + ox * sw;
                    for kx in 0..kw {
                        let v = input[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                let o = plane * out_h * out_w + oy * out_w + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
