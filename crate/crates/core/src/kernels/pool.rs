//! 2x2 stride-2 spatial reductions. Odd trailing rows and columns are cropped.

use crate::error::TensorError;
use crate::kernels::conv::{conv2d_f32, conv2d_int8, ConvParams, Padding};
use crate::qtensor::{FpTensor, QTensor, QuantParams, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Average,
    Subsample,
    Learned,
}

/// Weights of a learned reduction: a 2x2 stride-2 Int8 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedPool {
    pub weight: QTensor,
    pub bias: Vec<f32>,
    pub out: QuantParams,
}

pub fn pool_params(in_channels: usize, out_channels: usize) -> Result<ConvParams, TensorError> {
    ConvParams::new((2, 2), 2, Padding::Valid, in_channels, out_channels)
}

fn reduced(shape: Shape) -> Result<Shape, TensorError> {
    if shape.h() < 2 || shape.w() < 2 {
        return Err(TensorError::Dimension(format!(
            "pooling needs at least 2x2 spatial extent, got {shape}"
        )));
    }
    Ok(Shape::new(shape.n(), shape.h() / 2, shape.w() / 2, shape.c()))
}

#[inline]
fn mean4_half_away(sum: i32) -> i32 {
    if sum >= 0 {
        (sum + 2) / 4
    } else {
        -((-sum + 2) / 4)
    }
}

/// Quantized pooling. Fixed modes operate on codes and keep the input's
/// quantization parameters; `Learned` requires weights and uses their
/// output parameters.
pub fn pool(x: &QTensor, mode: PoolMode, learned: Option<&LearnedPool>) -> Result<QTensor, TensorError> {
    if mode == PoolMode::Learned {
        let lp = learned.ok_or_else(|| {
            TensorError::Config("learned pooling requires 2x2 stride-2 weights".into())
        })?;
        let ws = lp.weight.shape();
        let p = pool_params(x.shape().c(), ws.n())?;
        reduced(x.shape())?;
        return conv2d_int8(x, &lp.weight, &lp.bias, &p, lp.out);
    }
    let s = x.shape();
    let o = reduced(s)?;
    let (h, w, c) = (s.h(), s.w(), s.c());
    let d = x.data();
    let mut out = Vec::with_capacity(o.len());
    for b in 0..o.n() {
        for oy in 0..o.h() {
            for ox in 0..o.w() {
                let base = |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                let (i00, i01, i10, i11) = (base(0, 0), base(0, 1), base(1, 0), base(1, 1));
                for ch in 0..c {
                    let v = [d[i00 + ch], d[i01 + ch], d[i10 + ch], d[i11 + ch]];
                    out.push(match mode {
                        PoolMode::Max => *v.iter().max().unwrap(),
                        PoolMode::Subsample => v[0],
                        PoolMode::Average => {
                            let sum: i32 = v.iter().map(|&q| q as i32 - x.zero_point() as i32).sum();
                            (mean4_half_away(sum) + x.zero_point() as i32).clamp(-128, 127) as i8
                        }
                        PoolMode::Learned => unreachable!(),
                    });
                }
            }
        }
    }
    Ok(QTensor::from_raw(o, out, x.params()))
}

/// Float counterpart used by full-precision execution. `Learned` takes
/// float weights in OHWI order.
pub fn pool_f32(
    x: &FpTensor,
    mode: PoolMode,
    learned: Option<(&FpTensor, &[f32])>,
) -> Result<FpTensor, TensorError> {
    if mode == PoolMode::Learned {
        let (w, bias) = learned.ok_or_else(|| {
            TensorError::Config("learned pooling requires 2x2 stride-2 weights".into())
        })?;
        let p = pool_params(x.shape().c(), w.shape().n())?;
        reduced(x.shape())?;
        return conv2d_f32(x, w, bias, &p);
    }
    let s = x.shape();
    let o = reduced(s)?;
    let (h, w, c) = (s.h(), s.w(), s.c());
    let d = x.data();
    let mut out = Vec::with_capacity(o.len());
    for b in 0..o.n() {
        for oy in 0..o.h() {
            for ox in 0..o.w() {
                let base = |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                let (i00, i01, i10, i11) = (base(0, 0), base(0, 1), base(1, 0), base(1, 1));
                for ch in 0..c {
                    let v = [d[i00 + ch], d[i01 + ch], d[i10 + ch], d[i11 + ch]];
                    out.push(match mode {
                        PoolMode::Max => v.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                        PoolMode::Subsample => v[0],
                        PoolMode::Average => (v[0] + v[1] + v[2] + v[3]) * 0.25,
                        PoolMode::Learned => unreachable!(),
                    });
                }
            }
        }
    }
    Ok(FpTensor::from_raw(o, out))
}
