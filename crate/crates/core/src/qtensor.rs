//! Float, affine-quantized Int8 and bit-packed binary tensors.
//!
//! All activations use a row-major NHWC layout. Weight tensors reuse the same
//! four-dimensional [`Shape`] but interpret it per kernel (see `kernels`).

use std::fmt;

use crate::error::TensorError;

/// Four-dimensional tensor shape. For activations the axes are `(n, h, w, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn h(&self) -> usize {
        self.0[1]
    }

    pub fn w(&self) -> usize {
        self.0[2]
    }

    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of innermost rows, i.e. `n * h * w`.
    pub fn pixels(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "{n}x{h}x{w}x{c}")
    }
}

/// Affine quantization parameters: `real = scale * (code - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i8) -> Result<Self, TensorError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(TensorError::InvalidParameter(format!(
                "quantization scale must be positive and finite, got {scale}"
            )));
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// Symmetric parameters covering `[-max_abs, max_abs]`.
    pub fn symmetric(max_abs: f32) -> Self {
        let scale = if max_abs.is_finite() && max_abs > 0.0 {
            max_abs / 127.0
        } else {
            1.0 / 127.0
        };
        QuantParams {
            scale,
            zero_point: 0,
        }
    }

    /// Quantize one value: `clamp(round(v / scale) + zero_point, -128, 127)`,
    /// rounding half away from zero.
    #[inline]
    pub fn quantize(&self, v: f32) -> i8 {
        let q = (v / self.scale).round() + self.zero_point as f32;
        q.clamp(-128.0, 127.0) as i8
    }

    /// Same as [`quantize`](Self::quantize) for values computed in `f64`.
    #[inline]
    pub fn quantize_f64(&self, v: f64) -> i8 {
        let q = (v / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point as i32) as f32
    }

    /// Smallest and largest representable real values.
    pub fn range(&self) -> (f32, f32) {
        (self.dequantize(-128), self.dequantize(127))
    }
}

/// Dense `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FpTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FpTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::InvalidInput(format!(
                "non-finite value {} at index {pos}",
                data[pos]
            )));
        }
        Ok(FpTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        FpTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Builds a tensor without the finiteness scan. Used by kernels whose
    /// outputs are finite whenever their inputs are.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        FpTensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        if shape.len() != self.shape.len() {
            return Err(TensorError::Dimension(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(FpTensor {
            shape,
            data: self.data,
        })
    }
}

/// Int8 tensor with one per-tensor scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Shape,
    data: Vec<i8>,
    params: QuantParams,
}

impl QTensor {
    pub fn new(shape: Shape, data: Vec<i8>, params: QuantParams) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape} needs {} codes, got {}",
                shape.len(),
                data.len()
            )));
        }
        QuantParams::new(params.scale, params.zero_point)?;
        Ok(QTensor {
            shape,
            data,
            params,
        })
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<i8>, params: QuantParams) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        QTensor {
            shape,
            data,
            params,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn scale(&self) -> f32 {
        self.params.scale
    }

    pub fn zero_point(&self) -> i8 {
        self.params.zero_point
    }
}

/// Quantize a float tensor with the given per-tensor parameters.
pub fn quantize(t: &FpTensor, scale: f32, zero_point: i8) -> Result<QTensor, TensorError> {
    let params = QuantParams::new(scale, zero_point)?;
    if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
        return Err(TensorError::InvalidInput(format!(
            "cannot quantize non-finite value {v}"
        )));
    }
    let data = t.data.iter().map(|&v| params.quantize(v)).collect();
    Ok(QTensor::from_raw(t.shape, data, params))
}

pub fn dequantize(q: &QTensor) -> FpTensor {
    let p = q.params;
    let data = q.data.iter().map(|&c| p.dequantize(c)).collect();
    FpTensor::from_raw(q.shape, data)
}

/// Bit-packed ±1 tensor. Bits are packed along the innermost axis, 64 per
/// little-endian word; every innermost row starts on a fresh word and unused
/// high bits of the last word are zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Shape,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn zeros(shape: Shape) -> Self {
        let words_per_row = words_for_bits(shape.c());
        BitTensor {
            shape,
            words_per_row,
            words: vec![0; shape.pixels() * words_per_row],
        }
    }

    /// Packs logical bits (`true` = +1) in row-major order.
    pub fn from_bits(shape: Shape, bits: &[bool]) -> Result<Self, TensorError> {
        if bits.len() != shape.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape} needs {} bits, got {}",
                shape.len(),
                bits.len()
            )));
        }
        let mut t = BitTensor::zeros(shape);
        let c = shape.c();
        if c == 0 {
            return Ok(t);
        }
        for (row, chunk) in bits.chunks(c).enumerate() {
            let words = t.row_mut(row);
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    words[i / 64] |= 1u64 << (i % 64);
                }
            }
        }
        Ok(t)
    }

    /// Wraps pre-packed words, rejecting non-canonical padding.
    pub fn from_words(shape: Shape, words: Vec<u64>) -> Result<Self, TensorError> {
        let words_per_row = words_for_bits(shape.c());
        if words.len() != shape.pixels() * words_per_row {
            return Err(TensorError::Dimension(format!(
                "shape {shape} needs {} words, got {}",
                shape.pixels() * words_per_row,
                words.len()
            )));
        }
        let mask = tail_mask(shape.c());
        if words_per_row > 0 && mask != u64::MAX {
            for row in words.chunks(words_per_row) {
                if row[words_per_row - 1] & !mask != 0 {
                    return Err(TensorError::InvalidInput(
                        "padding bits beyond the channel count must be zero".into(),
                    ));
                }
            }
        }
        Ok(BitTensor {
            shape,
            words_per_row,
            words,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Packed words of innermost row `index` (one pixel for activations).
    #[inline]
    pub fn row(&self, index: usize) -> &[u64] {
        let start = index * self.words_per_row;
        &self.words[start..start + self.words_per_row]
    }

    fn row_mut(&mut self, index: usize) -> &mut [u64] {
        let start = index * self.words_per_row;
        &mut self.words[start..start + self.words_per_row]
    }

    pub fn get(&self, index: usize) -> bool {
        let c = self.shape.c();
        let (row, bit) = (index / c, index % c);
        self.row(row)[bit / 64] >> (bit % 64) & 1 == 1
    }

    /// Unpacks to logical bits in row-major order.
    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.shape.len()).map(|i| self.get(i)).collect()
    }

    /// Unpacks to ±1 values.
    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.shape.len())
            .map(|i| if self.get(i) { 1.0 } else { -1.0 })
            .collect()
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

pub(crate) fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask of the valid bits in the last word of a row holding `bits` bits.
pub(crate) fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Sign binarization; zero maps to +1.
pub fn binarize(t: &FpTensor) -> BitTensor {
    let shape = t.shape;
    let mut out = BitTensor::zeros(shape);
    let c = shape.c();
    if c == 0 {
        return out;
    }
    for (row, values) in t.data.chunks(c).enumerate() {
        let words = out.row_mut(row);
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
    }
    out
}

/// Binarizes the dequantized values of `q` directly from the codes:
/// `scale * (code - zp) >= 0` exactly when `code >= zp`.
pub fn binarize_quantized(q: &QTensor) -> BitTensor {
    let shape = q.shape;
    let zp = q.params.zero_point;
    let mut out = BitTensor::zeros(shape);
    let c = shape.c();
    if c == 0 {
        return out;
    }
    for (row, codes) in q.data.chunks(c).enumerate() {
        let words = out.row_mut(row);
        for (word, chunk) in words.iter_mut().zip(codes.chunks(64)) {
            let mut acc = 0u64;
            for (i, &code) in chunk.iter().enumerate() {
                acc |= ((code >= zp) as u64) << i;
            }
            *word = acc;
        }
    }
    out
}
