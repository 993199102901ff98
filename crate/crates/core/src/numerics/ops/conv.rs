//! 2-D convolution (cross-correlation) and transposed convolution via
//! im2col and a dense matrix product.

use super::linalg::gemm;
use super::shape::nchw;
use crate::error::{Error, Result};
use crate::numerics::tape::{Backward, GradSink, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Geometry of a convolution mapping an `h × w` image to `ho × wo`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits `(col_index, image_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.cols();
        for c in 0..self.channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            f(
                                row * cols + oi * self.wo + oj,
                                (c * self.h + ii as usize) * self.w + jj as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        self.for_each_tap(|ci, ii| col[ci] = image[ii]);
    }

    fn col2im_add(&self, col: &[f64], image: &mut [f64]) {
        self.for_each_tap(|ci, ii| image[ii] += col[ci]);
    }
}

fn out_extent(op: &str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return Err(Error::Config(format!(
            "{op}: kernel {k} with padding {pad} and stride {stride} gives no output for extent {size}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvBack {
    x: Var,
    w: Var,
    geo: Geometry,
    out_channels: usize,
    batch: usize,
    cols: Vec<f64>,
}

impl Backward for ConvBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let g = self.geo;
        let (rows, cols, co) = (g.rows(), g.cols(), self.out_channels);
        let in_plane = g.channels * g.h * g.w;
        let out_plane = co * cols;
        if let Some(slot) = sink.slot(self.w) {
            for n in 0..self.batch {
                gemm(
                    co,
                    cols,
                    rows,
                    &grad[n * out_plane..(n + 1) * out_plane],
                    false,
                    &self.cols[n * rows * cols..(n + 1) * rows * cols],
                    true,
                    slot,
                    true,
                );
            }
        }
        if sink.wants(self.x) {
            let w = tape.value(self.w).data();
            let mut dcol = vec![0.0; rows * cols];
            let slot = sink.slot(self.x).unwrap();
            for n in 0..self.batch {
                gemm(
                    rows,
                    co,
                    cols,
                    w,
                    true,
                    &grad[n * out_plane..(n + 1) * out_plane],
                    false,
                    &mut dcol,
                    false,
                );
                g.col2im_add(&dcol, &mut slot[n * in_plane..(n + 1) * in_plane]);
            }
        }
    }
}

struct ConvTransposeBack {
    x: Var,
    w: Var,
    /// Geometry of the adjoint convolution (output image to input image).
    geo: Geometry,
    in_channels: usize,
    batch: usize,
}

impl Backward for ConvTransposeBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let g = self.geo;
        let (rows, cols, ci) = (g.rows(), g.cols(), self.in_channels);
        let out_plane = g.channels * g.h * g.w;
        let in_plane = ci * cols;
        let x = tape.value(self.x).data();
        let w = tape.value(self.w).data();
        let mut gcol = vec![0.0; rows * cols];
        let want_x = sink.wants(self.x);
        let want_w = sink.wants(self.w);
        for n in 0..self.batch {
            g.im2col(&grad[n * out_plane..(n + 1) * out_plane], &mut gcol);
            if want_x {
                let slot = sink.slot(self.x).unwrap();
                gemm(
                    ci,
                    rows,
                    cols,
                    w,
                    false,
                    &gcol,
                    false,
                    &mut slot[n * in_plane..(n + 1) * in_plane],
                    true,
                );
            }
            if want_w {
                let slot = sink.slot(self.w).unwrap();
                gemm(
                    ci,
                    cols,
                    rows,
                    &x[n * in_plane..(n + 1) * in_plane],
                    false,
                    &gcol,
                    true,
                    slot,
                    true,
                );
            }
        }
    }
}

impl Tape {
    /// Cross-correlation of `x: [N, Ci, H, W]` with `w: [Co, Ci, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = nchw(self, "conv2d", x)?;
        let [co, wci, k, k2] = nchw(self, "conv2d", w)?;
        if wci != ci || k != k2 {
            return Err(Error::Dimension {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let geo = Geometry {
            channels: ci,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: out_extent("conv2d", h, k, stride, pad)?,
            wo: out_extent("conv2d", wd, k, stride, pad)?,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let mut col_all = vec![0.0; n * rows * cols];
        let mut out = vec![0.0; n * co * cols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_plane = ci * h * wd;
            for b in 0..n {
                let col = &mut col_all[b * rows * cols..(b + 1) * rows * cols];
                geo.im2col(&xv[b * in_plane..(b + 1) * in_plane], col);
                gemm(
                    co,
                    rows,
                    cols,
                    wv,
                    false,
                    col,
                    false,
                    &mut out[b * co * cols..(b + 1) * co * cols],
                    false,
                );
            }
        }
        let value = Tensor::from_parts(vec![n, co, geo.ho, geo.wo], out);
        Ok(self.push_op(
            value,
            &[x, w],
            ConvBack {
                x,
                w,
                geo,
                out_channels: co,
                batch: n,
                cols: col_all,
            },
        ))
    }

    /// Transposed convolution of `x: [N, Ci, H, W]` with `w: [Ci, Co, K, K]`;
    /// output extent is `(H - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = nchw(self, "conv_transpose2d", x)?;
        let [wci, co, k, k2] = nchw(self, "conv_transpose2d", w)?;
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let extent = |size: usize| -> Result<usize> {
            let full = (size - 1) * stride + k;
            if full <= 2 * pad {
                return Err(Error::Config(format!(
                    "conv_transpose2d: padding {pad} leaves no output for extent {size}"
                )));
            }
            Ok(full - 2 * pad)
        };
        let (ho, wo) = (extent(h)?, extent(wd)?);
        let geo = Geometry {
            channels: co,
            h: ho,
            w: wo,
            k,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let out_plane = co * ho * wo;
        let mut out = vec![0.0; n * out_plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = vec![0.0; rows * cols];
            for b in 0..n {
                gemm(
                    rows,
                    ci,
                    cols,
                    wv,
                    true,
                    &xv[b * ci * cols..(b + 1) * ci * cols],
                    false,
                    &mut col,
                    false,
                );
                geo.col2im_add(&col, &mut out[b * out_plane..(b + 1) * out_plane]);
            }
        }
        let value = Tensor::from_parts(vec![n, co, ho, wo], out);
        Ok(self.push_op(
            value,
            &[x, w],
            ConvTransposeBack {
                x,
                w,
                geo,
                in_channels: ci,
                batch: n,
            },
        ))
    }
}
