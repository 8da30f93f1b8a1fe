//! 2-D convolution lowered to im2col + GEMM.
//!
//! The whole batch is unrolled into one `[C·k·k, N·H'·W']` column matrix so
//! a single GEMM covers every sample. Columns are rebuilt in the backward
//! pass instead of being kept alive on the tape.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{MatMut, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], k: usize, stride: usize) -> Self {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeometry {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Output positions `ox` whose tap `kj` lands inside the input row.
    fn valid_range(&self, kj: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // ix = ox*stride + kj - pad must lie in [0, in_len)
        let mut lo = 0;
        while lo < out_len && (lo * self.stride + kj) < self.pad {
            lo += 1;
        }
        let mut hi = lo;
        while hi < out_len && (hi * self.stride + kj) < self.pad + in_len {
            hi += 1;
        }
        (lo, hi)
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols_n = g.col_cols();
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.col_rows() * cols_n];
    for ci in 0..g.c {
        for ki in 0..g.k {
            let (ylo, yhi) = g.valid_range(ki, g.ho, g.h);
            for kj in 0..g.k {
                let (xlo, xhi) = g.valid_range(kj, g.wo, g.w);
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let plane = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * hw_out..(b + 1) * hw_out];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = xlo + kj - g.pad;
                            out_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                out_row[ox] = src_row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols_n = g.col_cols();
    let hw_out = g.ho * g.wo;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            let (ylo, yhi) = g.valid_range(ki, g.ho, g.h);
            for kj in 0..g.k {
                let (xlo, xhi) = g.valid_range(kj, g.wo, g.w);
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let plane = &mut x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[b * hw_out..(b + 1) * hw_out];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                        let s_row = &src[oy * g.wo..(oy + 1) * g.wo];
                        for ox in xlo..xhi {
                            dst_row[ox * g.stride + kj - g.pad] += s_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation with "same" padding `(k-1)/2`.
///
/// `x: [N, C, H, W]`, `weight: [C', C, k, k]`, `bias: [C']`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), weight.value());
    if xv.rank() != 4 || wv.rank() != 4 {
        return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
    }
    let (co, ci, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if ci != xv.shape()[1] {
        return Err(Error::shape("conv2d channels", xv.shape(), wv.shape()));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d needs an odd square kernel, got {k}x{k2}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let g = ConvGeometry::new(xv.shape(), k, stride);
    let (rows, cols_n, hw_out) = (g.col_rows(), g.col_cols(), g.ho * g.wo);

    let cols = im2col(xv.data(), &g);
    let mut out2 = vec![T::zero(); co * cols_n];
    if let Some(b) = &bias {
        let bv = b.value();
        if bv.shape() != [co] {
            return Err(Error::shape("conv2d bias", bv.shape(), &[co]));
        }
        for (row, &bias) in out2.chunks_mut(cols_n).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v = bias);
        }
    }
    T::gemm(
        T::one(),
        MatRef::new(wv.data(), co, rows),
        MatRef::new(&cols, rows, cols_n),
        T::one(),
        MatMut::new(&mut out2, co, cols_n),
    );
    drop(cols);
    // [C', N·HW] -> [N, C', HW]
    let mut out = vec![T::zero(); g.n * co * hw_out];
    for o in 0..co {
        for b in 0..g.n {
            out[(b * co + o) * hw_out..(b * co + o + 1) * hw_out]
                .copy_from_slice(&out2[o * cols_n + b * hw_out..o * cols_n + (b + 1) * hw_out]);
        }
    }
    let out = Tensor::new([g.n, co, g.ho, g.wo], out)?;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(x.tape().push(
        out,
        &parents,
        Box::new(move |grad, mask| {
            let gd = grad.data();
            let mut g2 = vec![T::zero(); co * cols_n];
            for o in 0..co {
                for b in 0..g.n {
                    g2[o * cols_n + b * hw_out..o * cols_n + (b + 1) * hw_out]
                        .copy_from_slice(&gd[(b * co + o) * hw_out..(b * co + o + 1) * hw_out]);
                }
            }
            let gw = mask[1].then(|| {
                let cols = im2col(xv.data(), &g);
                let mut gw = vec![T::zero(); co * rows];
                T::gemm(
                    T::one(),
                    MatRef::new(&g2, co, cols_n),
                    MatRef::new(&cols, rows, cols_n).t(),
                    T::zero(),
                    MatMut::new(&mut gw, co, rows),
                );
                Tensor::new([co, ci, k, k], gw).expect("shape")
            });
            let gx = mask[0].then(|| {
                let mut gcols = vec![T::zero(); rows * cols_n];
                T::gemm(
                    T::one(),
                    MatRef::new(wv.data(), co, rows).t(),
                    MatRef::new(&g2, co, cols_n),
                    T::zero(),
                    MatMut::new(&mut gcols, rows, cols_n),
                );
                Tensor::new([g.n, g.c, g.h, g.w], col2im(&gcols, &g)).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| {
                    Tensor::new([co], g2.chunks(cols_n).map(|r| r.iter().copied().sum()).collect()).expect("shape")
                }));
            }
            grads
        }),
    ))
}

/// Output spatial size of [`conv2d`].
pub fn conv_output_size(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (size + 2 * pad - kernel) / stride + 1
}
