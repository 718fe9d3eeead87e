//! Cross-correlation kernels (im2col + GEMM) and their adjoints.
//!
//! Transposed convolution is not a separate kernel: its forward pass is the
//! input-gradient of a matching convolution, which makes the adjoint identity
//! hold by construction.

use super::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]` -> `[N,Cout,H',W']`.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; n * cout * ncols];
    let mut cols = vec![0.0; rows * ncols];
    let wm = MatRef::row_major(w.data(), cout, rows);
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * cout * ncols..(b + 1) * cout * ncols];
        gemm(wm, MatRef::row_major(&cols, rows, ncols), 0.0, dst);
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(ncols).enumerate() {
                let bv = bias.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_parts(vec![n, cout, oh, ow], out)
}

/// Gradient of `conv2d_forward` with respect to its input.
pub(crate) fn conv2d_backward_input(dy: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let n = dy.shape()[0];
    let cout = w.shape()[0];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let mut dx = vec![0.0; n * in_len];
    let mut cols = vec![0.0; rows * ncols];
    let wt = MatRef::row_major(w.data(), cout, rows).t();
    for b in 0..n {
        let dyb = &dy.data()[b * cout * ncols..(b + 1) * cout * ncols];
        gemm(wt, MatRef::row_major(dyb, cout, ncols), 0.0, &mut cols);
        col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    Tensor::from_parts(vec![n, g.cin, g.h, g.w], dx)
}

/// Gradient of `conv2d_forward` with respect to its weight.
pub(crate) fn conv2d_backward_weight(x: &Tensor, dy: &Tensor, w_shape: &[usize], g: &ConvGeom) -> Tensor {
    let n = x.shape()[0];
    let cout = w_shape[0];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let mut dw = vec![0.0; cout * rows];
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dyb = &dy.data()[b * cout * ncols..(b + 1) * cout * ncols];
        gemm(MatRef::row_major(dyb, cout, ncols), MatRef::row_major(&cols, rows, ncols).t(), 1.0, &mut dw);
    }
    Tensor::from_parts(w_shape.to_vec(), dw)
}

/// Per-channel sum of `dy: [N,C,H,W]`, the bias gradient.
pub(crate) fn channel_sum(dy: &Tensor) -> Tensor {
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let plane = dy.shape()[2] * dy.shape()[3];
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *acc += dy.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![c], out)
}

/// Geometry of the convolution whose input-gradient is the transposed
/// convolution of `x: [N,Cin,H,W]` with `w: [Cin,Cout,kh,kw]`.
pub(crate) fn transpose_geom(x_shape: &[usize], w_shape: &[usize], stride: usize) -> ConvGeom {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (kh, kw) = (w_shape[2], w_shape[3]);
    ConvGeom { cin: w_shape[1], h: (h - 1) * stride + kh, w: (w - 1) * stride + kw, kh, kw, stride, pad: 0 }
}
