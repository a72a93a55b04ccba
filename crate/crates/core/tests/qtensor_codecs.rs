use proptest::prelude::*;
use zippy_core::qtensor::{binarize, binarize_quantized, dequantize, quantize, BitTensor, FpTensor, QuantParams, Shape};

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..140).prop_map(|(n, h, w, c)| Shape::new(n, h, w, c))
}

proptest! {
    #[test]
    fn in_range_values_round_trip_within_half_step(
        s in shape(),
        scale in 1e-3f32..1.0,
        zp in any::<i8>(),
        seed in any::<u64>(),
    ) {
        let p = QuantParams::new(scale, zp).unwrap();
        let (lo, hi) = p.range();
        let data: Vec<f32> = (0..s.len())
            .map(|i| lo + (hi - lo) * (((seed as usize).wrapping_add(i * 7919) % 1000) as f32 / 999.0))
            .collect();
        let t = FpTensor::new(s, data.clone()).unwrap();
        let back = dequantize(&quantize(&t, scale, zp).unwrap());
        for (a, b) in data.iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= scale * 0.5 * (1.0 + 1e-4));
        }
    }

    #[test]
    fn bit_packing_round_trips(s in shape(), seed in any::<u64>()) {
        let bits: Vec<bool> = (0..s.len()).map(|i| (seed.rotate_left((i % 64) as u32) ^ i as u64) & 1 == 1).collect();
        let t = BitTensor::from_bits(s, &bits).unwrap();
        prop_assert_eq!(t.to_bits(), bits.clone());
        prop_assert_eq!(t.count_ones() as usize, bits.iter().filter(|b| **b).count());
        prop_assert_eq!(t.words_per_row(), s.c().div_ceil(64));
        let rebuilt = BitTensor::from_words(s, t.words().to_vec()).unwrap();
        prop_assert_eq!(rebuilt, t);
    }

    #[test]
    fn code_binarization_matches_float_sign(s in shape(), zp in any::<i8>(), seed in any::<u64>()) {
        let p = QuantParams::new(0.05, zp).unwrap();
        let data: Vec<f32> = (0..s.len()).map(|i| p.dequantize((seed.wrapping_mul(i as u64 + 1) >> 13) as i8)).collect();
        let t = FpTensor::new(s, data).unwrap();
        let q = quantize(&t, 0.05, zp).unwrap();
        prop_assert_eq!(binarize_quantized(&q), binarize(&dequantize(&q)));
    }
}

#[test]
fn invalid_inputs_rejected() {
    assert!(QuantParams::new(0.0, 0).is_err());
    assert!(QuantParams::new(f32::NAN, 0).is_err());
    assert!(FpTensor::new(Shape::new(1, 1, 1, 2), vec![0.0, f32::INFINITY]).is_err());
    let t = FpTensor::new(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
    assert!(quantize(&t, -0.1, 0).is_err());
    assert!(FpTensor::new(Shape::new(1, 1, 1, 3), vec![0.0; 2]).is_err());
    let s = Shape::new(1, 1, 1, 3);
    assert!(BitTensor::from_words(s, vec![0b1000]).is_err());
}

#[test]
fn saturation_clamps_to_code_range() {
    let p = QuantParams::new(0.1, 0).unwrap();
    assert_eq!(p.quantize(1e6), 127);
    assert_eq!(p.quantize(-1e6), -128);
    assert_eq!(p.quantize(0.05), 1);
    assert_eq!(p.quantize(-0.05), -1);
}
