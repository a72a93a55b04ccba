use crate::qtensor::{FpTensor, QTensor, QuantParams};

/// `v * relu6(v + 3) / 6`
#[inline]
pub fn hard_swish(v: f32) -> f32 {
    v * (v + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn hard_swish_f32(x: &FpTensor) -> FpTensor {
    let data = x.data().iter().map(|&v| hard_swish(v)).collect();
    FpTensor::from_raw(x.shape(), data)
}

/// Hard-swish on Int8 codes as a 256-entry table for one
/// `(input params, output params)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardSwishLut {
    table: [i8; 256],
}

impl HardSwishLut {
    pub fn new(input: QuantParams, output: QuantParams) -> Self {
        let mut table = [0i8; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let code = (i as i32 - 128) as i8;
            *slot = output.quantize(hard_swish(input.dequantize(code)));
        }
        HardSwishLut { table }
    }

    #[inline]
    pub fn apply(&self, code: i8) -> i8 {
        self.table[(code as i32 + 128) as usize]
    }
}

/// Applies hard-swish keeping the input's quantization parameters.
pub fn hard_swish_q(x: &QTensor) -> QTensor {
    hard_swish_q_to(x, x.params())
}

/// Applies hard-swish and requantizes to `out`.
pub fn hard_swish_q_to(x: &QTensor, out: QuantParams) -> QTensor {
    let lut = HardSwishLut::new(x.params(), out);
    let data = x.data().iter().map(|&q| lut.apply(q)).collect();
    QTensor::from_raw(x.shape(), data, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::Shape;

    #[test]
    fn hinge_points() {
        assert_eq!(hard_swish(0.0), 0.0);
        assert_eq!(hard_swish(-3.0), 0.0);
        assert_eq!(hard_swish(3.0), 3.0);
        let qp = QuantParams::new(0.05, 0).unwrap();
        let x = QTensor::new(Shape::new(1, 1, 1, 3), vec![0, -60, 60], qp).unwrap();
        let y = hard_swish_q(&x);
        assert_eq!(y.data()[0], 0);
        assert_eq!(y.data()[1], 0);
        assert!((y.data()[2] as i32 - 60).abs() <= 1);
    }

    #[test]
    fn all_codes_match_scalar_formula() {
        for (inp, out) in [
            (QuantParams::new(0.05, 0).unwrap(), QuantParams::new(0.05, 0).unwrap()),
            (QuantParams::new(0.03, -20).unwrap(), QuantParams::new(0.07, 9).unwrap()),
        ] {
            let lut = HardSwishLut::new(inp, out);
            let (lo, hi) = out.range();
            for code in -128i32..=127 {
                let want = (hard_swish(inp.dequantize(code as i8)) as f64).clamp(lo as f64, hi as f64);
                let got = out.dequantize(lut.apply(code as i8)) as f64;
                assert!((got - want).abs() <= out.scale as f64 / 2.0 + 1e-6, "code {code}");
            }
        }
    }
}
