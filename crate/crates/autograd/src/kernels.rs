//! Raw array kernels backing the convolution and pooling graph ops.
//!
//! Convolutions are lowered to im2col + matmul so the heavy lifting runs
//! through `ndarray`'s gemm. The three conv kernels form an adjoint triple:
//! `conv2d` is the forward map, `conv2d_input_grad` its adjoint in the input
//! argument (also the forward map of a transposed convolution), and
//! `conv2d_weight_grad` its adjoint in the weight argument.

use ndarray::{Array2, Array4, ArrayView4};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` [B,C,H,W] into patch rows [B*Ho*Wo, C*kh*kw].
fn im2col(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((b * ho * wo, c * kh * kw));
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().expect("contiguous");
    let cols_sl = cols.as_slice_mut().expect("contiguous");
    let row_w = c * kh * kw;
    for bi in 0..b {
        for oh in 0..ho {
            let iy0 = (oh * stride) as isize - pad as isize;
            for ow in 0..wo {
                let ix0 = (ow * stride) as isize - pad as isize;
                let row = ((bi * ho + oh) * wo + ow) * row_w;
                for ci in 0..c {
                    let xin = (bi * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = xin + iy as usize * w;
                        let out = row + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols_sl[out + kx] = xsl[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into an image.
fn col2im(
    cols: &Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut x = Array4::<f64>::zeros((b, c, h, w));
    let xsl = x.as_slice_mut().expect("contiguous");
    let csl = cols.as_slice().expect("contiguous");
    let row_w = c * kh * kw;
    for bi in 0..b {
        for oh in 0..ho {
            let iy0 = (oh * stride) as isize - pad as isize;
            for ow in 0..wo {
                let ix0 = (ow * stride) as isize - pad as isize;
                let row = ((bi * ho + oh) * wo + ow) * row_w;
                for ci in 0..c {
                    let xin = (bi * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = xin + iy as usize * w;
                        let src = row + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xsl[base + ix as usize] += csl[src + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// conv2d forward: x [B,Cin,H,W], w [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo].
pub fn conv2d(x: &ArrayView4<f64>, w: &ArrayView4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let (co, ci, kh, kw) = w.dim();
    assert_eq!(c, ci, "conv2d channel mismatch: input {c}, weight {ci}");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .to_shape(((co, ci * kh * kw), ndarray::Order::RowMajor))
        .expect("weight reshape")
        .to_owned();
    // [B*Ho*Wo, Cout]
    let out = cols.dot(&wmat.t());
    // rows are ordered (b, oh, ow); interpret as [B,Ho,Wo,Cout] then move C forward
    let out4 = out
        .into_shape_with_order((b, ho, wo, co))
        .expect("output reshape");
    let mut res = Array4::<f64>::zeros((b, co, ho, wo));
    res.assign(&out4.permuted_axes([0, 3, 1, 2]));
    res
}

/// Adjoint of conv2d in x: gy [B,Cout,Ho,Wo] -> [B,Cin,H,W].
///
/// Equivalently the forward pass of a stride-`stride` transposed convolution
/// with weight layout [Cout,Cin,kh,kw] mapping Cout -> Cin.
pub fn conv2d_input_grad(
    gy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Array4<f64> {
    let (b, co_g, ho, wo) = gy.dim();
    let (co, ci, kh, kw) = w.dim();
    assert_eq!(co_g, co, "input_grad channel mismatch");
    assert_eq!(ho, conv_out_dim(h, kh, stride, pad), "input_grad H mismatch");
    assert_eq!(wo, conv_out_dim(wd, kw, stride, pad), "input_grad W mismatch");
    let gmat = gy
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * ho * wo, co))
        .expect("gy reshape");
    let wmat = w
        .to_shape(((co, ci * kh * kw), ndarray::Order::RowMajor))
        .expect("weight reshape")
        .to_owned();
    let cols = gmat.dot(&wmat); // [B*Ho*Wo, Cin*kh*kw]
    col2im(&cols, b, ci, h, wd, kh, kw, stride, pad)
}

/// Adjoint of conv2d in w: (x, gy) -> [Cout,Cin,kh,kw].
pub fn conv2d_weight_grad(
    x: &ArrayView4<f64>,
    gy: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<f64> {
    let (b, c, _h, _w) = x.dim();
    let (bg, co, ho, wo) = gy.dim();
    assert_eq!(b, bg, "weight_grad batch mismatch");
    let cols = im2col(x, kh, kw, stride, pad); // [B*Ho*Wo, Cin*kh*kw]
    let gmat = gy
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * ho * wo, co))
        .expect("gy reshape");
    let wmat = gmat.t().dot(&cols); // [Cout, Cin*kh*kw]
    wmat.into_shape_with_order((co, c, kh, kw))
        .expect("weight grad reshape")
}

/// Average pooling with window = stride = `k`; H and W must divide by `k`.
pub fn avg_pool2d(x: &ArrayView4<f64>, k: usize) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    assert!(h % k == 0 && w % k == 0, "pool size {k} must divide {h}x{w}");
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array4::<f64>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x[[bi, ci, oh * k + ky, ow * k + kx]];
                        }
                    }
                    out[[bi, ci, oh, ow]] = acc * inv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2d`]: spread each cell over its window / k^2.
pub fn avg_unpool2d(g: &ArrayView4<f64>, k: usize) -> Array4<f64> {
    let (b, c, ho, wo) = g.dim();
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array4::<f64>::zeros((b, c, ho * k, wo * k));
    for bi in 0..b {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let v = g[[bi, ci, oh, ow]] * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            out[[bi, ci, oh * k + ky, ow * k + kx]] = v;
                        }
                    }
                }
            }
        }
    }
    out
}
