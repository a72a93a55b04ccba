//! Slow scalar oracles for the convolution kernels. They share no code with
//! the fast paths beyond the output geometry.

use crate::kernels::conv::ConvParams;
use crate::qtensor::{BitTensor, QTensor, QuantParams, Shape};

/// Number of outputs, then `f(output, input_offset, weight_offset)` for every
/// in-bounds tap of a convolution over NHWC input and OHWI weights.
fn for_each_tap(s: Shape, p: &ConvParams, mut f: impl FnMut(usize, usize, usize)) -> usize {
    let (n, h, w) = (s.n(), s.h(), s.w());
    let g = p.geometry(h, w).expect("valid geometry");
    let (kh, kw) = p.kernel;
    let cin = p.in_channels;
    let mut idx = 0;
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for co in 0..p.out_channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * p.stride + ky) as isize - g.pad_top as isize;
                            let ix = (ox * p.stride + kx) as isize - g.pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xo = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let wo = ((co * kh + ky) * kw + kx) * cin;
                            f(idx, xo, wo);
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
    idx
}

fn output_len(s: Shape, p: &ConvParams) -> usize {
    let g = p.geometry(s.h(), s.w()).expect("valid geometry");
    s.n() * g.out_h * g.out_w * p.out_channels
}

/// Dense ±1 convolution: every bit becomes `+1` (set) or `-1` (clear) and
/// the in-bounds products are summed as integers.
pub fn sign_conv(x: &BitTensor, w: &BitTensor, p: &ConvParams) -> Vec<i64> {
    let xs = x.to_signs();
    let ws = w.to_signs();
    let mut acc = vec![0i64; output_len(x.shape(), p)];
    for_each_tap(x.shape(), p, |i, xo, wo| {
        for c in 0..p.in_channels {
            acc[i] += (xs[xo + c] * ws[wo + c]) as i64;
        }
    });
    acc
}

fn real(params: QuantParams, code: i8) -> f64 {
    params.scale as f64 * (code as f64 - params.zero_point as f64)
}

/// Real-valued result of an Int8 convolution on dequantized operands in
/// `f64`, and per output the absolute sum of the bias and every product.
pub fn float_conv(x: &QTensor, w: &QTensor, bias: &[f32], p: &ConvParams) -> (Vec<f64>, Vec<f64>) {
    let len = output_len(x.shape(), p);
    let mut sum: Vec<f64> = (0..len).map(|i| bias[i % p.out_channels] as f64).collect();
    let mut l1: Vec<f64> = sum.iter().map(|b| b.abs()).collect();
    let (xp, wp) = (x.params(), w.params());
    for_each_tap(x.shape(), p, |i, xo, wo| {
        for c in 0..p.in_channels {
            let v = real(xp, x.data()[xo + c]) * real(wp, w.data()[wo + c]);
            sum[i] += v;
            l1[i] += v.abs();
        }
    });
    (sum, l1)
}
