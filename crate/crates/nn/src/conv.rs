//! 2-D cross-correlation lowered to matrix products (im2col). Work is split
//! over batch samples and reduced in batch order, so results do not depend
//! on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Shape-preserving geometry for an odd kernel size.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            pad: (k - 1) / 2,
        }
    }
}

/// Output shape, or an error on channel mismatch or bad geometry.
pub fn conv_output_shape(x: [usize; 4], w: [usize; 4], g: ConvGeometry) -> Result<[usize; 4]> {
    let [n, ci, h, wd] = x;
    let [co, wci, kh, kw] = w;
    if ci != wci {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {ci}, kernel {wci}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Invalid(format!(
            "conv2d kernel must be odd and square, got {kh}x{kw}"
        )));
    }
    if g.stride == 0 {
        return Err(Error::Invalid("conv2d stride 0".into()));
    }
    if h + 2 * g.pad < kh || wd + 2 * g.pad < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {kh} larger than padded input {h}x{wd}"
        )));
    }
    let ho = (h + 2 * g.pad - kh) / g.stride + 1;
    let wo = (wd + 2 * g.pad - kw) / g.stride + 1;
    Ok([n, co, ho, wo])
}

/// Output indices `o` with `0 <= o*stride + off - pad < in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > off {
        ((in_len + pad - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Sizes of one sample's convolution viewed as a matrix product.
#[derive(Clone, Copy)]
struct Lowered {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl Lowered {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1 kernel without padding or stride reads the input as is.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.g.stride == 1 && self.g.pad == 0
    }

    /// Unfolds one sample into a [ci·k·k, ho·wo] patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Lowered { ci, h, w, k, ho, wo, g } = *self;
        let mut cols = vec![0.0; self.rows() * self.cols()];
        for c in 0..ci {
            let xp = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                let (ilo, ihi) = valid_range(ho, h, ki, g.pad, g.stride);
                for kj in 0..k {
                    let (jlo, jhi) = valid_range(wo, w, kj, g.pad, g.stride);
                    let row = &mut cols[((c * k + ki) * k + kj) * ho * wo..][..ho * wo];
                    for oi in ilo..ihi {
                        let ii = oi * g.stride + ki - g.pad;
                        let src = &xp[ii * w..(ii + 1) * w];
                        let dst = &mut row[oi * wo..(oi + 1) * wo];
                        if g.stride == 1 {
                            let base = kj + jlo - g.pad;
                            dst[jlo..jhi].copy_from_slice(&src[base..base + (jhi - jlo)]);
                        } else {
                            for oj in jlo..jhi {
                                dst[oj] = src[oj * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds a patch matrix back onto one sample's input plane stack.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let Lowered { ci, h, w, k, ho, wo, g } = *self;
        for c in 0..ci {
            let xp = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                let (ilo, ihi) = valid_range(ho, h, ki, g.pad, g.stride);
                for kj in 0..k {
                    let (jlo, jhi) = valid_range(wo, w, kj, g.pad, g.stride);
                    let row = &cols[((c * k + ki) * k + kj) * ho * wo..][..ho * wo];
                    for oi in ilo..ihi {
                        let ii = oi * g.stride + ki - g.pad;
                        let dst = &mut xp[ii * w..(ii + 1) * w];
                        let src = &row[oi * wo..(oi + 1) * wo];
                        if g.stride == 1 {
                            let base = kj + jlo - g.pad;
                            for (d, s) in dst[base..base + (jhi - jlo)].iter_mut().zip(&src[jlo..jhi]) {
                                *d += s;
                            }
                        } else {
                            for oj in jlo..jhi {
                                dst[oj * g.stride + kj - g.pad] += src[oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major C = A·B (+ C when `accumulate`), with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold m·k, k·n and m·n elements laid out with the
    // strides passed here, and `c` does not alias `a` or `b`.
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

fn lowered(x_shape: [usize; 4], w_shape: [usize; 4], ho: usize, wo: usize, g: ConvGeometry) -> Lowered {
    Lowered {
        ci: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        k: w_shape[2],
        ho,
        wo,
        g,
    }
}

pub fn conv2d_forward(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, g: ConvGeometry) -> Result<Tensor4> {
    let out_shape = conv_output_shape(x.shape(), w.shape(), g)?;
    if let Some(b) = b {
        if b.shape() != [1, out_shape[1], 1, 1] {
            return Err(Error::Shape(format!(
                "conv2d bias {:?} for {} outputs",
                b.shape(),
                out_shape[1]
            )));
        }
    }
    let [_, co_n, ho, wo] = out_shape;
    let lw = lowered(x.shape(), w.shape(), ho, wo, g);
    let mut out = Tensor4::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(co_n * ho * wo)
        .enumerate()
        .for_each(|(n, y)| {
            if let Some(b) = b {
                for (plane, &bv) in y.chunks_exact_mut(ho * wo).zip(b.data()) {
                    plane.fill(bv);
                }
            }
            let xs = x.sample(n);
            if lw.is_pointwise() {
                gemm(co_n, lw.rows(), lw.cols(), w.data(), false, xs, false, y, true);
            } else {
                let cols = lw.im2col(xs);
                gemm(co_n, lw.rows(), lw.cols(), w.data(), false, &cols, false, y, true);
            }
        });
    Ok(out)
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input(dy: &Tensor4, w: &Tensor4, x_shape: [usize; 4], g: ConvGeometry) -> Tensor4 {
    let [_, co_n, ho, wo] = dy.shape();
    let lw = lowered(x_shape, w.shape(), ho, wo, g);
    let mut dx = Tensor4::zeros(x_shape);
    let per = x_shape[1] * x_shape[2] * x_shape[3];
    dx.data_mut().par_chunks_mut(per).enumerate().for_each(|(n, dxs)| {
        let d = dy.sample(n);
        if lw.is_pointwise() {
            gemm(lw.rows(), co_n, lw.cols(), w.data(), true, d, false, dxs, false);
        } else {
            let mut cols = vec![0.0; lw.rows() * lw.cols()];
            gemm(lw.rows(), co_n, lw.cols(), w.data(), true, d, false, &mut cols, false);
            lw.col2im(&cols, dxs);
        }
    });
    dx
}

/// Gradient with respect to the kernel. Per-sample contributions are summed
/// in batch order.
pub fn conv2d_backward_weight(dy: &Tensor4, x: &Tensor4, w_shape: [usize; 4], g: ConvGeometry) -> Tensor4 {
    let [n_n, co_n, ho, wo] = dy.shape();
    let lw = lowered(x.shape(), w_shape, ho, wo, g);
    let parts: Vec<Vec<f64>> = (0..n_n)
        .into_par_iter()
        .map(|n| {
            let mut part = vec![0.0; co_n * lw.rows()];
            let xs = x.sample(n);
            if lw.is_pointwise() {
                gemm(
                    co_n,
                    lw.cols(),
                    lw.rows(),
                    dy.sample(n),
                    false,
                    xs,
                    true,
                    &mut part,
                    false,
                );
            } else {
                let cols = lw.im2col(xs);
                gemm(
                    co_n,
                    lw.cols(),
                    lw.rows(),
                    dy.sample(n),
                    false,
                    &cols,
                    true,
                    &mut part,
                    false,
                );
            }
            part
        })
        .collect();
    let mut dw = Tensor4::zeros(w_shape);
    for part in parts {
        for (a, p) in dw.data_mut().iter_mut().zip(part) {
            *a += p;
        }
    }
    dw
}

/// Gradient with respect to a [1, C, 1, 1] bias.
pub fn conv2d_backward_bias(dy: &Tensor4) -> Tensor4 {
    let c = dy.c();
    let mut db = Tensor4::zeros([1, c, 1, 1]);
    for n in 0..dy.n() {
        for co in 0..c {
            db.data_mut()[co] += dy.plane(n, co).iter().sum::<f64>();
        }
    }
    db
}
