//! Raw-slice convolution kernels shared by the forward and backward passes.
//!
//! Convolutions go through im2col into a `[C*k*k, N*Ho*Wo]` column matrix so a
//! whole batch is a single GEMM. The transposed convolution reuses the same
//! geometry read in the other direction: it is the adjoint of the convolution
//! that maps its output back onto its input.

use crate::tensor::Scalar;

/// Geometry of a cross-correlation from `[n, c, h, w]` to `[n, f, ho, wo]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output size of a convolution: `floor((size + 2 pad - k) / stride) + 1`.
    pub fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if k == 0 || stride == 0 || size + 2 * pad < k {
            return None;
        }
        Some((size + 2 * pad - k) / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column matrix back onto an `[n, c, h, w]` image (adjoint of `im2col`).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let ncols = g.col_cols();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = iy as usize * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dst[base + ix as usize];
                                *d = *d + src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, ch, p]` -> `[ch, n * p]`
pub fn batch_to_channel_major<T: Scalar>(x: &[T], n: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for c in 0..ch {
            out[c * n * p + b * p..c * n * p + (b + 1) * p]
                .copy_from_slice(&x[(b * ch + c) * p..(b * ch + c + 1) * p]);
        }
    }
    out
}

/// `[ch, n * p]` -> `[n, ch, p]`
pub fn channel_to_batch_major<T: Scalar>(x: &[T], n: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for c in 0..ch {
            out[(b * ch + c) * p..(b * ch + c + 1) * p]
                .copy_from_slice(&x[c * n * p + b * p..c * n * p + (b + 1) * p]);
        }
    }
    out
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out_fm = vec![T::zero(); g.f * ncols];
    T::gemm(
        g.f,
        rows,
        ncols,
        T::one(),
        weight,
        (rows as isize, 1),
        &cols,
        (ncols as isize, 1),
        T::zero(),
        &mut out_fm,
        (ncols as isize, 1),
    );
    let p = g.ho * g.wo;
    for (f, row) in out_fm.chunks_mut(ncols).enumerate() {
        for v in row.iter_mut() {
            *v = *v + bias[f];
        }
    }
    channel_to_batch_major(&out_fm, g.n, g.f, p)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    grad_out: &[T],
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let p = g.ho * g.wo;
    let dout_fm = batch_to_channel_major(grad_out, g.n, g.f, p);

    let (weight_grad, bias_grad) = if need_params {
        let cols = im2col(x, g);
        let mut dw = vec![T::zero(); g.f * rows];
        T::gemm(
            g.f,
            ncols,
            rows,
            T::one(),
            &dout_fm,
            (ncols as isize, 1),
            &cols,
            (1, ncols as isize),
            T::zero(),
            &mut dw,
            (rows as isize, 1),
        );
        let db = dout_fm
            .chunks(ncols)
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    let input_grad = need_input.then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        T::gemm(
            rows,
            g.f,
            ncols,
            T::one(),
            weight,
            (1, rows as isize),
            &dout_fm,
            (ncols as isize, 1),
            T::zero(),
            &mut dcols,
            (ncols as isize, 1),
        );
        col2im(&dcols, g)
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Transposed convolution. `g` describes the *forward* convolution whose adjoint
/// this is: `g.c`/`g.h`/`g.w` is the transposed conv's output, `g.f`/`g.ho`/`g.wo`
/// its input. The weight is laid out `[g.f, g.c, k, k]`.
pub fn conv_transpose_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let p = g.ho * g.wo;
    let x_fm = batch_to_channel_major(x, g.n, g.f, p);
    let mut dcols = vec![T::zero(); rows * ncols];
    T::gemm(
        rows,
        g.f,
        ncols,
        T::one(),
        weight,
        (1, rows as isize),
        &x_fm,
        (ncols as isize, 1),
        T::zero(),
        &mut dcols,
        (ncols as isize, 1),
    );
    let mut out = col2im(&dcols, g);
    let plane = g.h * g.w;
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % g.c];
        for v in chunk.iter_mut() {
            *v = *v + b;
        }
    }
    out
}

pub fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    grad_out: &[T],
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let p = g.ho * g.wo;
    let cols = im2col(grad_out, g);

    let input_grad = need_input.then(|| {
        let mut dx_fm = vec![T::zero(); g.f * ncols];
        T::gemm(
            g.f,
            rows,
            ncols,
            T::one(),
            weight,
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::zero(),
            &mut dx_fm,
            (ncols as isize, 1),
        );
        channel_to_batch_major(&dx_fm, g.n, g.f, p)
    });

    let (weight_grad, bias_grad) = if need_params {
        let x_fm = batch_to_channel_major(x, g.n, g.f, p);
        let mut dw = vec![T::zero(); g.f * rows];
        T::gemm(
            g.f,
            ncols,
            rows,
            T::one(),
            &x_fm,
            (ncols as isize, 1),
            &cols,
            (1, ncols as isize),
            T::zero(),
            &mut dw,
            (rows as isize, 1),
        );
        let plane = g.h * g.w;
        let mut db = vec![T::zero(); g.c];
        for (i, chunk) in grad_out.chunks(plane).enumerate() {
            db[i % g.c] = db[i % g.c] + chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
