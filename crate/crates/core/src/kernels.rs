//! Low-level numeric kernels shared by the autodiff graph and the plain
//! inference path: conv2d (im2col + matmul), bilinear upsampling, channel
//! softmax. Forward and backward passes are deterministic regardless of
//! thread count: batch items are processed independently and reduced in
//! index order.

use ndarray::prelude::*;
use rayon::prelude::*;

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `(C_in, H, W)` item into a `(C_in*k*k, Ho*Wo)` matrix with
/// zero padding.
pub fn im2col(input: &ArrayView3<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = input.dim();
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    let mut cols = Array2::<f64>::zeros((c_in * kernel * kernel, ho * wo));
    for ci in 0..c_in {
        let plane = input.index_axis(Axis(0), ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row_idx = (ci * kernel + ky) * kernel + kx;
                let mut row = cols.row_mut(row_idx);
                let row = row.as_slice_mut().expect("cols row is contiguous");
                let (ox_lo, ox_hi) = valid_out_range(w, kernel, stride, pad, kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    let src = src.as_slice().expect("input row is contiguous");
                    let base = oy * wo;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * stride + kx - pad;
                        row[base + ox] = src[ix];
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `ox` for which `ox*stride + kx - pad` lands inside `[0, w)`.
fn valid_out_range(w: usize, kernel: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let wo = conv_out_len(w, kernel, stride, pad);
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    // largest ox with ox*stride <= w - 1 + pad - kx
    let hi = if w + pad > kx {
        (((w - 1 + pad - kx) / stride) + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Folds a `(C_in*k*k, Ho*Wo)` gradient matrix back onto a `(C_in, H, W)`
/// input gradient (the adjoint of [`im2col`]).
pub fn col2im(
    cols: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    let mut out = Array3::<f64>::zeros((c_in, h, w));
    for ci in 0..c_in {
        let mut plane = out.index_axis_mut(Axis(0), ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row_idx = (ci * kernel + ky) * kernel + kx;
                let row = cols.row(row_idx);
                let row = row.as_slice().expect("cols row is contiguous");
                let (ox_lo, ox_hi) = valid_out_range(w, kernel, stride, pad, kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(iy as usize);
                    let dst = dst.as_slice_mut().expect("plane row is contiguous");
                    let base = oy * wo;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * stride + kx - pad;
                        dst[ix] += row[base + ox];
                    }
                }
            }
        }
    }
    out
}

/// `input (B,C_in,H,W) * weight (C_out,C_in,k,k) + bias (C_out)`.
pub fn conv2d_forward(
    input: &Array4<f64>,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c_in, h, w) = input.dim();
    let (c_out, c_in2, kh, kw) = weight.dim();
    assert_eq!(c_in, c_in2, "conv input channels mismatch");
    assert_eq!(kh, kw, "only square kernels supported");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kh, stride, pad);
    let wmat = weight
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("weight is contiguous");

    let per_item: Vec<Array2<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(&input.index_axis(Axis(0), bi), kh, stride, pad);
            wmat.dot(&cols)
        })
        .collect();

    let mut out = Array4::<f64>::zeros((b, c_out, ho, wo));
    for (bi, o) in per_item.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(
            &o.into_shape_with_order((c_out, ho, wo))
                .expect("conv output reshape"),
        );
    }
    for co in 0..c_out {
        let bv = bias[co];
        out.index_axis_mut(Axis(1), co).mapv_inplace(|v| v + bv);
    }
    out
}

/// Gradients of a conv2d wrt input, weight, and bias. `grad_input` is
/// skipped when the input is a graph leaf that needs no gradient.
pub fn conv2d_backward(
    input: &Array4<f64>,
    weight: &Array4<f64>,
    grad_out: &Array4<f64>,
    stride: usize,
    pad: usize,
    need_grad_input: bool,
) -> (Option<Array4<f64>>, Array4<f64>, Array1<f64>) {
    let (b, c_in, h, w) = input.dim();
    let (c_out, _, kh, _) = weight.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let k2 = c_in * kh * kh;
    let wmat = weight
        .view()
        .into_shape_with_order((c_out, k2))
        .expect("weight is contiguous");

    struct ItemGrads {
        d_weight: Array2<f64>,
        d_bias: Array1<f64>,
        d_input: Option<Array3<f64>>,
    }

    let per_item: Vec<ItemGrads> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let g = grad_out.index_axis(Axis(0), bi);
            let gmat = g
                .to_shape((c_out, ho * wo))
                .expect("grad reshape")
                .into_owned();
            let cols = im2col(&input.index_axis(Axis(0), bi), kh, stride, pad);
            let d_weight = gmat.dot(&cols.t());
            let d_bias = gmat.sum_axis(Axis(1));
            let d_input = if need_grad_input {
                let d_cols = wmat.t().dot(&gmat);
                Some(col2im(&d_cols, c_in, h, w, kh, stride, pad))
            } else {
                None
            };
            ItemGrads {
                d_weight,
                d_bias,
                d_input,
            }
        })
        .collect();

    let mut d_weight = Array2::<f64>::zeros((c_out, k2));
    let mut d_bias = Array1::<f64>::zeros(c_out);
    let mut d_input = if need_grad_input {
        Some(Array4::<f64>::zeros((b, c_in, h, w)))
    } else {
        None
    };
    for (bi, ig) in per_item.into_iter().enumerate() {
        d_weight += &ig.d_weight;
        d_bias += &ig.d_bias;
        if let (Some(di), Some(item)) = (d_input.as_mut(), ig.d_input) {
            di.index_axis_mut(Axis(0), bi).assign(&item);
        }
    }
    let d_weight = d_weight
        .into_shape_with_order((c_out, c_in, kh, kh))
        .expect("weight grad reshape");
    (d_input, d_weight, d_bias)
}

/// Per-axis bilinear interpolation table: for each output index, the two
/// source indices and the weight of the second one. Uses the half-pixel
/// convention `src = (dst + 0.5) * len_in / len_out - 0.5`.
fn bilinear_table(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = (s.floor() as usize).min(len_in - 1);
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, s - i0 as f64)
            }
        })
        .collect()
}

/// Bilinear resize of `(B,C,h,w)` to `(B,C,th,tw)`.
pub fn upsample_bilinear(input: &Array4<f64>, th: usize, tw: usize) -> Array4<f64> {
    let (b, c, h, w) = input.dim();
    if th == h && tw == w {
        return input.clone();
    }
    let ty = bilinear_table(h, th);
    let tx = bilinear_table(w, tw);
    let mut out = Array4::<f64>::zeros((b, c, th, tw));
    for bi in 0..b {
        for ci in 0..c {
            let src = input.index_axis(Axis(0), bi);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = src[(y0, x0)];
                    let v01 = src[(y0, x1)];
                    let v10 = src[(y1, x0)];
                    let v11 = src[(y1, x1)];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    dst[(oy, ox)] = top + fy * (bot - top);
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: scatters `(B,C,th,tw)` gradients back
/// onto the `(B,C,h,w)` source.
pub fn upsample_bilinear_backward(
    grad_out: &Array4<f64>,
    h: usize,
    w: usize,
) -> Array4<f64> {
    let (b, c, th, tw) = grad_out.dim();
    if th == h && tw == w {
        return grad_out.clone();
    }
    let ty = bilinear_table(h, th);
    let tx = bilinear_table(w, tw);
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.index_axis(Axis(0), bi);
            let g = g.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g[(oy, ox)];
                    dst[(y0, x0)] += gv * (1.0 - fy) * (1.0 - fx);
                    dst[(y0, x1)] += gv * (1.0 - fy) * fx;
                    dst[(y1, x0)] += gv * fy * (1.0 - fx);
                    dst[(y1, x1)] += gv * fy * fx;
                }
            }
        }
    }
    out
}

/// Numerically stable softmax over the channel axis of `(B,C,H,W)`.
pub fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = logits.dim();
    let mut out = logits.clone();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(out[(bi, ci, y, x)]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (out[(bi, ci, y, x)] - mx).exp();
                    out[(bi, ci, y, x)] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for ci in 0..c {
                    out[(bi, ci, y, x)] *= inv;
                }
            }
        }
    }
    out
}

/// Backward of channel softmax given its output `y` and upstream gradient.
pub fn softmax_channels_backward(y: &Array4<f64>, grad: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = y.dim();
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for yy in 0..h {
            for xx in 0..w {
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += grad[(bi, ci, yy, xx)] * y[(bi, ci, yy, xx)];
                }
                for ci in 0..c {
                    out[(bi, ci, yy, xx)] =
                        y[(bi, ci, yy, xx)] * (grad[(bi, ci, yy, xx)] - dot);
                }
            }
        }
    }
    out
}
