//! Direct convolutions over NHWC activations and OHWI weights.
//!
//! Every kernel parallelizes over output rows only; each output element is
//! computed by one thread in a fixed order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::qtensor::{
    binarize_quantized, dequantize, BitTensor, FpTensor, QTensor, QuantParams, Shape,
};

/// Largest `kh * kw * in_channels` the Int8 kernel accepts. With operands
/// offset by their zero points every product is at most `255 * 255`, and
/// `65025 * 2^15 < 2^31`, so the 32-bit accumulator cannot overflow.
pub const MAX_ACCUMULATION_LENGTH: usize = 1 << 15;

/// Accuracy of [`conv2d_int8`] for one output. `l1` is the absolute sum of
/// the bias and all dequantized products in the window. Half an output step
/// covers the final rounding; the relative term covers `f32` rounding of the
/// scales and the bias.
pub fn int8_error_bound(out: QuantParams, l1: f64) -> f64 {
    let step = out.scale as f64;
    0.5 * step + 1e-6 * (l1 + step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output size `ceil(in / stride)`, padding split with the extra row or
    /// column at the bottom/right.
    Same,
    /// Output size `floor((in - k) / stride) + 1`; trailing rows and columns
    /// that do not fill a window are cropped.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Output geometry of a convolution for one input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvParams {
    pub fn new(
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self, TensorError> {
        if kernel.0 == 0 || kernel.1 == 0 || stride == 0 || in_channels == 0 || out_channels == 0
        {
            return Err(TensorError::InvalidParameter(format!(
                "kernel {kernel:?}, stride {stride} and channels {in_channels}->{out_channels} must be positive"
            )));
        }
        Ok(ConvParams {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    /// `k x k`, stride 1, same padding.
    pub fn same(k: usize, in_channels: usize, out_channels: usize) -> Result<Self, TensorError> {
        Self::new((k, k), 1, Padding::Same, in_channels, out_channels)
    }

    /// Weight shape in OHWI order.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.in_channels,
        )
    }

    pub fn geometry(&self, in_h: usize, in_w: usize) -> Result<ConvGeometry, TensorError> {
        let (kh, kw) = self.kernel;
        let s = self.stride;
        match self.padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(s);
                let out_w = in_w.div_ceil(s);
                let pad_h = ((out_h.saturating_sub(1)) * s + kh).saturating_sub(in_h);
                let pad_w = ((out_w.saturating_sub(1)) * s + kw).saturating_sub(in_w);
                Ok(ConvGeometry {
                    out_h,
                    out_w,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                })
            }
            Padding::Valid => {
                if in_h < kh || in_w < kw {
                    return Err(TensorError::Dimension(format!(
                        "input {in_h}x{in_w} smaller than kernel {kh}x{kw}"
                    )));
                }
                Ok(ConvGeometry {
                    out_h: (in_h - kh) / s + 1,
                    out_w: (in_w - kw) / s + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
        }
    }

    /// Multiply-accumulates performed for one `h x w` input (batch of one).
    pub fn macs(&self, in_h: usize, in_w: usize) -> u64 {
        match self.geometry(in_h, in_w) {
            Ok(g) => {
                (g.out_h * g.out_w) as u64
                    * (self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels) as u64
            }
            Err(_) => 0,
        }
    }

    fn check_input(&self, shape: Shape) -> Result<(), TensorError> {
        if shape.c() != self.in_channels {
            return Err(TensorError::Dimension(format!(
                "input has {} channels, convolution expects {}",
                shape.c(),
                self.in_channels
            )));
        }
        Ok(())
    }

    fn check_weights(&self, shape: Shape) -> Result<(), TensorError> {
        if shape != self.weight_shape() {
            return Err(TensorError::Dimension(format!(
                "weights have shape {shape}, expected {} (OHWI)",
                self.weight_shape()
            )));
        }
        Ok(())
    }
}

/// Valid kernel taps along one axis for output index `o`: returns
/// `(first_tap, end_tap, first_input_index)`.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize, usize) {
    let origin = (o * stride) as isize - pad as isize;
    let first = (-origin).max(0) as usize;
    let end = ((len as isize - origin).max(0) as usize).min(k);
    let first = first.min(end);
    (first, end, (origin + first as isize) as usize)
}

fn check_bias(bias: &[f32], cout: usize) -> Result<(), TensorError> {
    if bias.len() != cout {
        return Err(TensorError::Dimension(format!(
            "bias has {} entries, expected {cout}",
            bias.len()
        )));
    }
    Ok(())
}

const CO_BLOCK: usize = 4;

/// Four dot products of one activation span against four weight spans.
#[inline(always)]
fn dot4_portable(x: &[i16], w: [&[i16]; CO_BLOCK]) -> [i32; CO_BLOCK] {
    let mut acc = [0i32; CO_BLOCK];
    for (j, wj) in w.iter().enumerate() {
        // Integer addition is associative, which lets this reduction vectorize.
        acc[j] = x
            .iter()
            .zip(wj.iter())
            .fold(0i32, |s, (&a, &b)| s.wrapping_add((a as i32).wrapping_mul(b as i32)));
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot4_avx2(x: &[i16], w: [&[i16]; CO_BLOCK]) -> [i32; CO_BLOCK] {
    use std::arch::x86_64::*;
    let n = x.len();
    let full = n / 16;
    let mut acc = [_mm256_setzero_si256(); CO_BLOCK];
    for c in 0..full {
        let xv = _mm256_loadu_si256(x.as_ptr().add(c * 16) as *const __m256i);
        for j in 0..CO_BLOCK {
            let wv = _mm256_loadu_si256(w[j].as_ptr().add(c * 16) as *const __m256i);
            acc[j] = _mm256_add_epi32(acc[j], _mm256_madd_epi16(xv, wv));
        }
    }
    let mut out = [0i32; CO_BLOCK];
    for j in 0..CO_BLOCK {
        let v = acc[j];
        let s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256(v, 1));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01_00_11_10));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10_11_00_01));
        out[j] = _mm_cvtsi128_si32(s);
        for i in full * 16..n {
            out[j] = out[j].wrapping_add(x[i] as i32 * w[j][i] as i32);
        }
    }
    out
}

struct Int8Job<'a> {
    xs: &'a [i16],
    ws: &'a [i16],
    bias: &'a [f32],
    p: &'a ConvParams,
    g: ConvGeometry,
    h: usize,
    wd: usize,
    multiplier: f64,
    out: QuantParams,
}

#[inline(always)]
fn int8_row(job: &Int8Job, row: usize, out_row: &mut [i8], dot4: impl Fn(&[i16], [&[i16]; CO_BLOCK]) -> [i32; CO_BLOCK]) {
    let p = job.p;
    let g = job.g;
    let (kh, kw) = p.kernel;
    let (cin, cout) = (p.in_channels, p.out_channels);
    let (h, wd) = (job.h, job.wd);
    let (b, oy) = (row / g.out_h, row % g.out_h);
    let (ky0, ky1, iy0) = tap_range(oy, p.stride, g.pad_top, kh, h);
    let mut co = 0;
    while co < cout {
        let nb = CO_BLOCK.min(cout - co);
        for ox in 0..g.out_w {
            let (kx0, kx1, ix0) = tap_range(ox, p.stride, g.pad_left, kw, wd);
            let span = (kx1 - kx0) * cin;
            let mut acc = [0i32; CO_BLOCK];
            for ky in ky0..ky1 {
                let iy = iy0 + (ky - ky0);
                let xo = ((b * h + iy) * wd + ix0) * cin;
                let x = &job.xs[xo..xo + span];
                let wrow = |j: usize| {
                    let c = co + j.min(nb - 1);
                    let wo = ((c * kh + ky) * kw + kx0) * cin;
                    &job.ws[wo..wo + span]
                };
                let d = dot4(x, [wrow(0), wrow(1), wrow(2), wrow(3)]);
                for j in 0..CO_BLOCK {
                    acc[j] = acc[j].wrapping_add(d[j]);
                }
            }
            for j in 0..nb {
                let real = acc[j] as f64 * job.multiplier + job.bias[co + j] as f64;
                out_row[ox * cout + co + j] = job.out.quantize_f64(real);
            }
        }
        co += nb;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn int8_row_avx2(job: &Int8Job, row: usize, out_row: &mut [i8]) {
    // SAFETY: this function only runs when AVX2 was detected.
    int8_row(job, row, out_row, |x, w| unsafe { dot4_avx2(x, w) })
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Int8 convolution with 32-bit accumulation and requantization to `out`.
///
/// Each output is `requantize(sum((x - zp_x) * (w - zp_w)) * s_x * s_w + bias)`.
/// Padded taps contribute a real zero. `bias` holds `out_channels` real values.
/// The integer sum is exact, so the dequantized output stays within
/// [`int8_error_bound`] of the real-valued convolution clamped to the output
/// range.
pub fn conv2d_int8(
    x: &QTensor,
    w: &QTensor,
    bias: &[f32],
    p: &ConvParams,
    out: QuantParams,
) -> Result<QTensor, TensorError> {
    p.check_input(x.shape())?;
    p.check_weights(w.shape())?;
    check_bias(bias, p.out_channels)?;
    let (kh, kw) = p.kernel;
    let cin = p.in_channels;
    let cout = p.out_channels;
    if kh * kw * cin > MAX_ACCUMULATION_LENGTH {
        return Err(TensorError::Internal(format!(
            "accumulation length {} exceeds the 32-bit accumulator bound {MAX_ACCUMULATION_LENGTH}",
            kh * kw * cin
        )));
    }
    let shape = x.shape();
    let (n, h, wd) = (shape.n(), shape.h(), shape.w());
    let g = p.geometry(h, wd)?;

    let zx = x.zero_point() as i16;
    let xs: Vec<i16> = x.data().iter().map(|&v| v as i16 - zx).collect();
    let zw = w.zero_point() as i16;
    let ws: Vec<i16> = w.data().iter().map(|&v| v as i16 - zw).collect();

    let out_shape = Shape::new(n, g.out_h, g.out_w, cout);
    let mut data = vec![0i8; out_shape.len()];
    let row_len = g.out_w * cout;
    if row_len == 0 {
        return Ok(QTensor::from_raw(out_shape, data, out));
    }
    let job = Int8Job {
        xs: &xs,
        ws: &ws,
        bias,
        p,
        g,
        h,
        wd,
        multiplier: x.scale() as f64 * w.scale() as f64,
        out,
    };
    let avx2 = has_avx2();
    data.par_chunks_mut(row_len).enumerate().for_each(|(row, out_row)| {
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: AVX2 support was detected at runtime.
            unsafe { int8_row_avx2(&job, row, out_row) };
            return;
        }
        let _ = avx2;
        int8_row(&job, row, out_row, dot4_portable)
    });
    Ok(QTensor::from_raw(out_shape, data, out))
}

struct F32Job<'a> {
    xd: &'a [f32],
    hwio: &'a [f32],
    bias: &'a [f32],
    p: &'a ConvParams,
    g: ConvGeometry,
    h: usize,
    wd: usize,
}

#[inline(always)]
fn f32_row(job: &F32Job, row: usize, out_row: &mut [f32]) {
    let p = job.p;
    let g = job.g;
    let (kh, kw) = p.kernel;
    let (cin, cout) = (p.in_channels, p.out_channels);
    let (h, wd) = (job.h, job.wd);
    let (b, oy) = (row / g.out_h, row % g.out_h);
    let (ky0, ky1, iy0) = tap_range(oy, p.stride, g.pad_top, kh, h);
    for ox in 0..g.out_w {
        let (kx0, kx1, ix0) = tap_range(ox, p.stride, g.pad_left, kw, wd);
        let acc = &mut out_row[ox * cout..(ox + 1) * cout];
        acc.copy_from_slice(job.bias);
        for ky in ky0..ky1 {
            let iy = iy0 + (ky - ky0);
            for kx in kx0..kx1 {
                let ix = ix0 + (kx - kx0);
                let px = &job.xd[((b * h + iy) * wd + ix) * cin..][..cin];
                let tap = ky * kw + kx;
                for (ci, &xv) in px.iter().enumerate() {
                    let wrow = &job.hwio[(tap * cin + ci) * cout..][..cout];
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += xv * wv;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn f32_row_avx2(job: &F32Job, row: usize, out_row: &mut [f32]) {
    f32_row(job, row, out_row)
}

/// Float convolution used by full-precision layers. Accumulation order is
/// fixed per output element, so vectorized and scalar paths agree bitwise.
pub fn conv2d_f32(
    x: &FpTensor,
    w: &FpTensor,
    bias: &[f32],
    p: &ConvParams,
) -> Result<FpTensor, TensorError> {
    p.check_input(x.shape())?;
    p.check_weights(w.shape())?;
    check_bias(bias, p.out_channels)?;
    let (kh, kw) = p.kernel;
    let cin = p.in_channels;
    let cout = p.out_channels;
    let shape = x.shape();
    let (n, h, wd) = (shape.n(), shape.h(), shape.w());
    let g = p.geometry(h, wd)?;

    // OHWI -> HWIO so the innermost loop runs over output channels.
    let wsrc = w.data();
    let mut hwio = vec![0f32; wsrc.len()];
    for co in 0..cout {
        for tap in 0..kh * kw {
            for ci in 0..cin {
                hwio[(tap * cin + ci) * cout + co] = wsrc[(co * kh * kw + tap) * cin + ci];
            }
        }
    }

    let out_shape = Shape::new(n, g.out_h, g.out_w, cout);
    let mut data = vec![0f32; out_shape.len()];
    let row_len = g.out_w * cout;
    if row_len == 0 {
        return Ok(FpTensor::from_raw(out_shape, data));
    }
    let job = F32Job {
        xd: x.data(),
        hwio: &hwio,
        bias,
        p,
        g,
        h,
        wd,
    };
    let avx2 = has_avx2();
    data.par_chunks_mut(row_len).enumerate().for_each(|(row, out_row)| {
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: AVX2 support was detected at runtime.
            unsafe { f32_row_avx2(&job, row, out_row) };
            return;
        }
        let _ = avx2;
        f32_row(&job, row, out_row)
    });
    Ok(FpTensor::from_raw(out_shape, data))
}

/// XNOR-popcount convolution of ±1 operands.
///
/// Each output is the exact ±1 dot product over the in-bounds part of the
/// window: `n - 2 * popcount(x xor w)` where `n` counts the in-bounds taps
/// times the channel count. Padded taps contribute zero.
pub fn conv2d_bin(x: &BitTensor, w: &BitTensor, p: &ConvParams) -> Result<FpTensor, TensorError> {
    p.check_input(x.shape())?;
    p.check_weights(w.shape())?;
    let (kh, kw) = p.kernel;
    let cin = p.in_channels;
    let cout = p.out_channels;
    let shape = x.shape();
    let (n, h, wd) = (shape.n(), shape.h(), shape.w());
    let g = p.geometry(h, wd)?;
    let wpr = x.words_per_row();
    let xw = x.words();
    let ww = w.words();

    let out_shape = Shape::new(n, g.out_h, g.out_w, cout);
    let mut data = vec![0f32; out_shape.len()];
    let row_len = g.out_w * cout;
    if row_len == 0 {
        return Ok(FpTensor::from_raw(out_shape, data));
    }
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, out_row)| {
            let (b, oy) = (row / g.out_h, row % g.out_h);
            let (ky0, ky1, iy0) = tap_range(oy, p.stride, g.pad_top, kh, h);
            for ox in 0..g.out_w {
                let (kx0, kx1, ix0) = tap_range(ox, p.stride, g.pad_left, kw, wd);
                let taps = (ky1 - ky0) * (kx1 - kx0);
                let total = (taps * cin) as i64;
                let span = (kx1 - kx0) * wpr;
                let dst = &mut out_row[ox * cout..(ox + 1) * cout];
                for (co, slot) in dst.iter_mut().enumerate() {
                    let mut diff = 0u32;
                    for ky in ky0..ky1 {
                        let iy = iy0 + (ky - ky0);
                        // Adjacent pixels and adjacent kernel columns are both
                        // contiguous, so one window row is a single word run.
                        let xo = ((b * h + iy) * wd + ix0) * wpr;
                        let wo = ((co * kh + ky) * kw + kx0) * wpr;
                        diff += xw[xo..xo + span]
                            .iter()
                            .zip(&ww[wo..wo + span])
                            .map(|(a, c)| (a ^ c).count_ones())
                            .sum::<u32>();
                    }
                    *slot = (total - 2 * diff as i64) as f32;
                }
            }
        });
    Ok(FpTensor::from_raw(out_shape, data))
}

/// Binary weights of a Bin or Bin-R layer: `out = alpha * (±1 conv) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinConvWeights {
    pub bits: BitTensor,
    pub alpha: f32,
    pub bias: Vec<f32>,
}

/// Int8 1x1 projection used on the residual path when channel counts differ.
/// Its output is requantized with the layer's output parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: QTensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpec {
    pub enabled: bool,
    pub projection: Option<Projection>,
}

impl ResidualSpec {
    pub fn identity() -> Self {
        ResidualSpec {
            enabled: true,
            projection: None,
        }
    }

    pub fn projected(projection: Projection) -> Self {
        ResidualSpec {
            enabled: true,
            projection: Some(projection),
        }
    }

    /// Checks the projection-iff-channel-mismatch invariant for `p`.
    pub fn validate(&self, p: &ConvParams) -> Result<(), TensorError> {
        if !self.enabled {
            return Err(TensorError::Config(
                "binary residual convolution requires an enabled residual".into(),
            ));
        }
        let mismatch = p.in_channels != p.out_channels;
        match (&self.projection, mismatch) {
            (None, true) => Err(TensorError::Config(format!(
                "residual needs an Int8 1x1 projection for {} -> {} channels",
                p.in_channels, p.out_channels
            ))),
            (Some(_), false) => Err(TensorError::Config(
                "projection given although input and output channels match".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl Projection {
    pub fn params(&self, p: &ConvParams) -> Result<ConvParams, TensorError> {
        ConvParams::new((1, 1), p.stride, Padding::Valid, p.in_channels, p.out_channels)
    }
}

/// Bin layer without residual: `requantize(alpha * conv2d_bin(sign(x), w) + bias)`.
pub fn conv2d_bin_layer(
    x: &QTensor,
    w: &BinConvWeights,
    p: &ConvParams,
    out: QuantParams,
) -> Result<QTensor, TensorError> {
    check_bias(&w.bias, p.out_channels)?;
    let counts = conv2d_bin(&binarize_quantized(x), &w.bits, p)?;
    let cout = p.out_channels;
    let data = counts
        .data()
        .chunks(cout)
        .flat_map(|px| {
            px.iter()
                .zip(&w.bias)
                .map(|(&c, &b)| out.quantize(w.alpha * c + b))
        })
        .collect();
    Ok(QTensor::from_raw(counts.shape(), data, out))
}

/// Binary convolution with an Int8 residual (Bin-R).
///
/// `out = requantize(alpha * conv2d_bin(sign(x), w) + bias + r)` computed in
/// `f32` in that order, where `r = dequantize(x)` for the identity residual or
/// `dequantize(conv2d_int8(x, projection, out))` when channels differ. The sign
/// pattern is taken from the dequantized Int8 input.
pub fn conv2d_bin_residual(
    x: &QTensor,
    w: &BinConvWeights,
    res: &ResidualSpec,
    p: &ConvParams,
    out: QuantParams,
) -> Result<QTensor, TensorError> {
    res.validate(p)?;
    check_bias(&w.bias, p.out_channels)?;
    let counts = conv2d_bin(&binarize_quantized(x), &w.bits, p)?;
    let residual = match &res.projection {
        None => {
            if counts.shape() != x.shape() {
                return Err(TensorError::Config(format!(
                    "identity residual needs matching shapes, input {} vs output {}",
                    x.shape(),
                    counts.shape()
                )));
            }
            dequantize(x)
        }
        Some(proj) => {
            let pp = proj.params(p)?;
            let r = dequantize(&conv2d_int8(x, &proj.weight, &proj.bias, &pp, out)?);
            if r.shape() != counts.shape() {
                return Err(TensorError::Config(format!(
                    "projected residual {} does not match output {}",
                    r.shape(),
                    counts.shape()
                )));
            }
            r
        }
    };
    let cout = p.out_channels;
    let data = counts
        .data()
        .chunks(cout)
        .zip(residual.data().chunks(cout))
        .flat_map(|(px, rs)| {
            px.iter()
                .zip(&w.bias)
                .zip(rs)
                .map(|((&c, &b), &r)| out.quantize(w.alpha * c + b + r))
        })
        .collect();
    Ok(QTensor::from_raw(counts.shape(), data, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{binarize, quantize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_q(shape: Shape, params: QuantParams, rng: &mut ChaCha8Rng) -> QTensor {
        let data = (0..shape.len()).map(|_| rng.random::<i8>()).collect();
        QTensor::new(shape, data, params).unwrap()
    }

    /// Dense float convolution on dequantized operands, computed in f64.
    fn float_conv_oracle(x: &QTensor, w: &QTensor, bias: &[f32], p: &ConvParams) -> Vec<f64> {
        let xs = x.shape();
        let g = p.geometry(xs.h(), xs.w()).unwrap();
        let (kh, kw) = p.kernel;
        let mut out = Vec::new();
        for b in 0..xs.n() {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for co in 0..p.out_channels {
                        let mut acc = bias[co] as f64;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as isize - g.pad_top as isize;
                                let ix = (ox * p.stride + kx) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h() as isize || ix >= xs.w() as isize {
                                    continue;
                                }
                                for ci in 0..p.in_channels {
                                    let xi = ((b * xs.h() + iy as usize) * xs.w() + ix as usize)
                                        * p.in_channels
                                        + ci;
                                    let wi = ((co * kh + ky) * kw + kx) * p.in_channels + ci;
                                    acc += x.params().dequantize(x.data()[xi]) as f64
                                        * w.params().dequantize(w.data()[wi]) as f64;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_weights_give_quantized_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ConvParams::same(3, 4, 3).unwrap();
        let x = rand_q(Shape::new(1, 5, 5, 4), QuantParams::new(0.1, 3).unwrap(), &mut rng);
        let w = QTensor::new(p.weight_shape(), vec![0; p.weight_shape().len()], QuantParams::new(0.02, 0).unwrap()).unwrap();
        let bias = [0.5f32, -0.25, 0.0];
        let out = QuantParams::new(0.05, 0).unwrap();
        let y = conv2d_int8(&x, &w, &bias, &p, out).unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, &[10, -5, 0]);
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        let p = ConvParams::same(1, c, c).unwrap();
        let xp = QuantParams::new(0.05, 0).unwrap();
        let x = rand_q(Shape::new(1, 6, 6, c), xp, &mut rng);
        // weight code 50 at scale 0.02 is exactly 1.0
        let mut wd = vec![0i8; c * c];
        for i in 0..c {
            wd[i * c + i] = 50;
        }
        let w = QTensor::new(p.weight_shape(), wd, QuantParams::new(0.02, 0).unwrap()).unwrap();
        let y = conv2d_int8(&x, &w, &[0.0; 4], &p, xp).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn int8_matches_float_oracle_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvParams::same(3, 4, 8).unwrap();
        let xp = QuantParams::new(0.02, -5).unwrap();
        let wp = QuantParams::new(0.01, 2).unwrap();
        let x = rand_q(Shape::new(1, 8, 8, 4), xp, &mut rng);
        let w = rand_q(p.weight_shape(), wp, &mut rng);
        let bias: Vec<f32> = (0..8).map(|i| i as f32 * 0.1 - 0.4).collect();
        let out = QuantParams::new(0.1, 1).unwrap();
        let y = conv2d_int8(&x, &w, &bias, &p, out).unwrap();
        let oracle = float_conv_oracle(&x, &w, &bias, &p);
        let (lo, hi) = out.range();
        let bound = (9 * 4) as f64 * (xp.scale * wp.scale) as f64 / 2.0 + out.scale as f64 / 2.0;
        for (q, r) in y.data().iter().zip(&oracle) {
            let got = out.dequantize(*q) as f64;
            let want = r.clamp(lo as f64, hi as f64);
            assert!((got - want).abs() <= bound, "{got} vs {want}");
        }
    }

    #[test]
    fn int8_rejects_shape_errors() {
        let p = ConvParams::same(3, 4, 8).unwrap();
        let qp = QuantParams::new(0.1, 0).unwrap();
        let x = QTensor::new(Shape::new(1, 4, 4, 3), vec![0; 48], qp).unwrap();
        let w = QTensor::new(p.weight_shape(), vec![0; p.weight_shape().len()], qp).unwrap();
        assert!(matches!(conv2d_int8(&x, &w, &[0.0; 8], &p, qp), Err(TensorError::Dimension(_))));
        let x = QTensor::new(Shape::new(1, 4, 4, 4), vec![0; 64], qp).unwrap();
        assert!(matches!(conv2d_int8(&x, &w, &[0.0; 7], &p, qp), Err(TensorError::Dimension(_))));
        let big = ConvParams::same(3, 4000, 1).unwrap();
        let x = QTensor::new(Shape::new(1, 1, 1, 4000), vec![0; 4000], qp).unwrap();
        let w = QTensor::new(big.weight_shape(), vec![0; big.weight_shape().len()], qp).unwrap();
        assert!(matches!(conv2d_int8(&x, &w, &[0.0], &big, qp), Err(TensorError::Internal(_))));
    }

    #[test]
    fn same_geometry_follows_standard_formula() {
        let p = ConvParams::new((3, 3), 2, Padding::Same, 1, 1).unwrap();
        let g = p.geometry(7, 8).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        assert_eq!((g.pad_top, g.pad_left), (1, 0));
        let v = ConvParams::new((2, 2), 2, Padding::Valid, 1, 1).unwrap();
        let g = v.geometry(7, 9).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 4));
    }

    fn window_bits(x: &BitTensor, p: &ConvParams, oy: usize, ox: usize) -> Vec<bool> {
        let s = x.shape();
        let mut bits = Vec::new();
        for ky in 0..p.kernel.0 {
            for kx in 0..p.kernel.1 {
                for c in 0..s.c() {
                    bits.push(x.get(((oy + ky) * s.w() + ox + kx) * s.c() + c));
                }
            }
        }
        bits
    }

    #[test]
    fn bin_identical_and_complement_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 40;
        let p = ConvParams::new((3, 3), 1, Padding::Valid, c, 2).unwrap();
        let shape = Shape::new(1, 3, 3, c);
        let bits: Vec<bool> = (0..shape.len()).map(|_| rng.random()).collect();
        let x = BitTensor::from_bits(shape, &bits).unwrap();
        let win = window_bits(&x, &p, 0, 0);
        let mut wbits = win.clone();
        wbits.extend(win.iter().map(|b| !b));
        let w = BitTensor::from_bits(p.weight_shape(), &wbits).unwrap();
        let y = conv2d_bin(&x, &w, &p).unwrap();
        let n = (9 * c) as f32;
        assert_eq!(y.data(), &[n, -n]);
    }

    #[test]
    fn bin_residual_requires_projection_on_mismatch() {
        let p = ConvParams::same(3, 4, 8).unwrap();
        assert!(matches!(ResidualSpec::identity().validate(&p), Err(TensorError::Config(_))));
        let qp = QuantParams::new(0.1, 0).unwrap();
        let proj = Projection {
            weight: QTensor::new(Shape::new(8, 1, 1, 4), vec![0; 32], qp).unwrap(),
            bias: vec![0.0; 8],
        };
        assert!(ResidualSpec::projected(proj.clone()).validate(&p).is_ok());
        let same = ConvParams::same(3, 4, 4).unwrap();
        assert!(ResidualSpec::identity().validate(&same).is_ok());
        assert!(ResidualSpec::projected(proj).validate(&same).is_err());
        let disabled = ResidualSpec { enabled: false, projection: None };
        assert!(disabled.validate(&same).is_err());
    }

    #[test]
    fn bin_residual_zero_input() {
        let c = 4;
        let p = ConvParams::same(3, c, c).unwrap();
        let qp = QuantParams::new(0.1, 0).unwrap();
        let x = QTensor::new(Shape::new(1, 4, 4, c), vec![0; 64], qp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wb: Vec<bool> = (0..p.weight_shape().len()).map(|_| rng.random()).collect();
        let w = BinConvWeights {
            bits: BitTensor::from_bits(p.weight_shape(), &wb).unwrap(),
            alpha: 0.05,
            bias: vec![0.0; c],
        };
        let y = conv2d_bin_residual(&x, &w, &ResidualSpec::identity(), &p, qp).unwrap();
        // zero input binarizes to all +1 and the identity residual adds zero
        let ones = BitTensor::from_bits(x.shape(), &vec![true; 64]).unwrap();
        let counts = conv2d_bin(&ones, &w.bits, &p).unwrap();
        let expect: Vec<i8> = counts.data().iter().map(|&v| qp.quantize(0.05 * v)).collect();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn bin_residual_composes_independent_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (cin, cout) in [(4usize, 4usize), (4, 8)] {
            let p = ConvParams::same(3, cin, cout).unwrap();
            let xp = QuantParams::new(0.03, -2).unwrap();
            let out = QuantParams::new(0.2, 0).unwrap();
            let x = rand_q(Shape::new(1, 6, 5, cin), xp, &mut rng);
            let wb: Vec<bool> = (0..p.weight_shape().len()).map(|_| rng.random()).collect();
            let w = BinConvWeights {
                bits: BitTensor::from_bits(p.weight_shape(), &wb).unwrap(),
                alpha: 0.07,
                bias: (0..cout).map(|i| i as f32 * 0.01).collect(),
            };
            let res = if cin == cout {
                ResidualSpec::identity()
            } else {
                ResidualSpec::projected(Projection {
                    weight: rand_q(Shape::new(cout, 1, 1, cin), QuantParams::new(0.01, 0).unwrap(), &mut rng),
                    bias: vec![0.1; cout],
                })
            };
            let y = conv2d_bin_residual(&x, &w, &res, &p, out).unwrap();

            let counts = conv2d_bin(&binarize(&dequantize(&x)), &w.bits, &p).unwrap();
            let r = match &res.projection {
                None => dequantize(&x),
                Some(pr) => {
                    let pp = ConvParams::new((1, 1), 1, Padding::Valid, cin, cout).unwrap();
                    dequantize(&conv2d_int8(&x, &pr.weight, &pr.bias, &pp, out).unwrap())
                }
            };
            let expect: Vec<i8> = counts
                .data()
                .iter()
                .zip(r.data())
                .enumerate()
                .map(|(i, (&c, &rv))| out.quantize(w.alpha * c + w.bias[i % cout] + rv))
                .collect();
            assert_eq!(y.data(), expect.as_slice());
        }
    }

    #[test]
    fn f32_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ConvParams::new((3, 3), 2, Padding::Same, 3, 5).unwrap();
        let qp = QuantParams::new(0.05, 0).unwrap();
        let xq = rand_q(Shape::new(2, 7, 6, 3), qp, &mut rng);
        let wq = rand_q(p.weight_shape(), QuantParams::new(0.01, 0).unwrap(), &mut rng);
        let bias = vec![0.3f32; 5];
        let y = conv2d_f32(&dequantize(&xq), &dequantize(&wq), &bias, &p).unwrap();
        let oracle = float_conv_oracle(&xq, &wq, &bias, &p);
        assert_eq!(y.data().len(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
        let _ = quantize(&y, 0.1, 0).unwrap();
    }
}
