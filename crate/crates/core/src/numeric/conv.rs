//! Cross-correlation and pooling kernels on plain tensors.
//!
//! Convolutions lower to a single GEMM through an im2col buffer. The buffer is
//! returned to the caller so the backward pass can reuse it.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        let &[c_in, h, w] = input else {
            return Err(Error::shape("conv2d", "input rank", 3, input.len()));
        };
        let &[c_out, kc, kh, kw] = kernel else {
            return Err(Error::shape("conv2d", "kernel rank", 4, kernel.len()));
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", "input channels (axis 0)", kc, c_in));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "kernel extent (axes 2-3)", ">= 1", format!("{kh}x{kw}")));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape("conv2d", "input height (axis 1)", format!(">= {}", kh.saturating_sub(2 * pad)), h));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "input width (axis 2)", format!(">= {}", kw.saturating_sub(2 * pad)), w));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            h_out: h + 2 * pad - kh + 1,
            w_out: w + 2 * pad - kw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` over raw strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents describe sub-slices of `a`, `b`, `c` whose
    // bounds were checked by the callers via the conv geometry.
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

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch() * g.pixels()];
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * g.pixels()..(row + 1) * g.pixels()];
                for oy in 0..g.h_out {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * g.pixels()..(row + 1) * g.pixels()];
                for oy in 0..g.h_out {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Saved im2col buffer; empty for pointwise kernels, which read the input directly.
#[derive(Debug)]
pub(crate) struct ConvSaved {
    pub geometry: ConvGeometry,
    pub cols: Vec<f64>,
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
) -> Result<(Tensor, ConvSaved)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape("conv2d", "bias (axis 0)", g.c_out, format!("{:?}", b.shape())));
        }
    }
    let cols = if g.is_pointwise() { Vec::new() } else { im2col(input.data(), &g) };
    let b_mat: &[f64] = if g.is_pointwise() { input.data() } else { &cols };
    let mut out = vec![0.0; g.c_out * g.pixels()];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * g.pixels()..(o + 1) * g.pixels()].fill(bv);
        }
    }
    let k = g.patch();
    gemm(
        g.c_out,
        k,
        g.pixels(),
        kernel.data(),
        (k as isize, 1),
        b_mat,
        (g.pixels() as isize, 1),
        1.0,
        &mut out,
    );
    let out = Tensor::new(&[g.c_out, g.h_out, g.w_out], out)?;
    Ok((out, ConvSaved { geometry: g, cols }))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    saved: &ConvSaved,
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = &saved.geometry;
    let px = g.pixels();
    let k = g.patch();
    let dy = grad_out.data();
    let cols: &[f64] = if g.is_pointwise() { input.data() } else { &saved.cols };

    let kernel_grad = if want.1 {
        let mut dw = vec![0.0; g.c_out * k];
        // dW[o, r] = sum_p dy[o, p] * cols[r, p]
        gemm(g.c_out, px, k, dy, (px as isize, 1), cols, (1, px as isize), 0.0, &mut dw);
        Some(Tensor::new(kernel.shape(), dw)?)
    } else {
        None
    };

    let bias_grad = if want.2 {
        let db: Vec<f64> = (0..g.c_out).map(|o| dy[o * px..(o + 1) * px].iter().sum()).collect();
        Some(Tensor::new(&[g.c_out], db)?)
    } else {
        None
    };

    let input_grad = if want.0 {
        let mut dcols = vec![0.0; k * px];
        // dcols[r, p] = sum_o W[o, r] * dy[o, p]
        gemm(k, g.c_out, px, kernel.data(), (1, k as isize), dy, (px as isize, 1), 0.0, &mut dcols);
        let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, g) };
        Some(Tensor::new(&[g.c_in, g.h, g.w], dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    })
}

/// 2x2 max pooling; returns the pooled map and the flat argmax index of each window.
pub(crate) fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.chw("maxpool2")?;
    if h % 2 != 0 {
        return Err(Error::shape("maxpool2", "height (axis 1)", "even", h));
    }
    if w % 2 != 0 {
        return Err(Error::shape("maxpool2", "width (axis 2)", "even", w));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                // row-major window order; strict `>` keeps the first maximum
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, arg))
}

/// 2x2 average pooling on plain tensors (no gradient).
pub fn avgpool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw("avgpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avgpool2", "spatial extent", "even", format!("{h}x{w}")));
    }
    let x = input.data();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                out.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], pad: usize) -> Tensor {
        let g = ConvGeometry::new(x.shape(), k.shape(), pad).unwrap();
        let mut out = Tensor::zeros(&[g.c_out, g.h_out, g.w_out]);
        for o in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = b[o];
                    for c in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += k.data()[((o * g.c_in + c) * g.kh + ky) * g.kw + kx]
                                        * x.data()[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_naive_loops() {
        let x = Tensor::from_fn(&[3, 5, 4], |i| ((i * 7 % 11) as f64) - 5.0);
        let k = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 5 % 7) as f64) * 0.1 - 0.3);
        let b = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        for pad in [0, 1, 2] {
            let (fast, _) = conv2d_forward(&x, &k, Some(&b), pad).unwrap();
            let slow = naive_conv(&x, &k, b.data(), pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_oversized_kernel_and_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 7, 3]), None, 1).is_err());
        let err = conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn avgpool_halves_extent() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2(&x).unwrap().data(), &[2.5]);
    }
}
