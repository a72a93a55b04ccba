use proptest::prelude::*;
use zippy_core::netgraph::fixtures::{fixture_image, noise_image, random_store};
use zippy_core::netgraph::{
    decode, decode_detection, encode_detection, extract, DecodeConfig, DescriptorKind, DescriptorPayload,
    ExtractConfig, HeadMaps, Network, NetworkSpec,
};
use zippy_core::qtensor::{FpTensor, Shape};

/// Quadratic reference: repeatedly take the best remaining candidate and
/// delete everything within the radius of it.
fn oracle(scores: &[f32], loc: &[f32], gw: usize, w: usize, h: usize, cfg: &DecodeConfig) -> Vec<(f32, f32, f32)> {
    let mut pool: Vec<(f32, f32, f32, usize)> = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        let (cx, cy) = (i % gw, i / gw);
        if cx * 8 >= w || cy * 8 >= h || !(s > cfg.score_floor) {
            continue;
        }
        let x = ((cx as f32 + 0.5 + loc[2 * i]) * 8.0).clamp(0.0, (w - 1) as f32);
        let y = ((cy as f32 + 0.5 + loc[2 * i + 1]) * 8.0).clamp(0.0, (h - 1) as f32);
        pool.push((x, y, s, i));
    }
    let mut out = Vec::new();
    while out.len() < cfg.max_keypoints && !pool.is_empty() {
        let mut best = 0;
        for j in 1..pool.len() {
            let (a, b) = (pool[j], pool[best]);
            if a.2 > b.2 || (a.2 == b.2 && a.3 < b.3) {
                best = j;
            }
        }
        let p = pool[best];
        out.push((p.0, p.1, p.2));
        let r2 = cfg.nms_radius * cfg.nms_radius;
        pool.retain(|q| (q.0 - p.0) * (q.0 - p.0) + (q.1 - p.1) * (q.1 - p.1) > r2);
    }
    out
}

fn maps(gh: usize, gw: usize, scores: Vec<f32>, loc: Vec<f32>) -> HeadMaps {
    HeadMaps {
        score: FpTensor::new(Shape::new(1, gh, gw, 1), scores).unwrap(),
        location: FpTensor::new(Shape::new(1, gh, gw, 2), loc).unwrap(),
        descriptor: FpTensor::zeros(Shape::new(1, gh, gw, 8)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decode_matches_quadratic_oracle(
        gh in 2usize..8,
        gw in 2usize..8,
        seed in any::<u64>(),
        radius in 0.0f32..20.0,
        floor in 0.0f32..0.6,
        max_kp in 1usize..40,
        crop_w in 0usize..8,
        crop_h in 0usize..8,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = gh * gw;
        // Coarse levels force score ties.
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..10) as f32 / 10.0).collect();
        let loc: Vec<f32> = (0..2 * n).map(|_| rng.random_range(-0.5f32..=0.5)).collect();
        let (w, h) = (gw * 8 - crop_w.min(7), gh * 8 - crop_h.min(7));
        let cfg = DecodeConfig { max_keypoints: max_kp, nms_radius: radius, score_floor: floor };
        let got = decode(&maps(gh, gw, scores.clone(), loc.clone()), w, h, 8, &cfg);
        let want = oracle(&scores, &loc, gw, w, h, &cfg);
        let got: Vec<(f32, f32, f32)> = got.iter().map(|k| (k.x, k.y, k.score)).collect();
        prop_assert_eq!(&got, &want);
        prop_assert!(got.len() <= max_kp);
        prop_assert!(got.windows(2).all(|p| p[0].2 >= p[1].2));
        prop_assert!(got.iter().all(|k| k.0 >= 0.0 && k.0 < w as f32 && k.1 >= 0.0 && k.1 < h as f32));
    }
}

#[test]
fn empty_maps_decode_to_nothing() {
    let kps = decode(&maps(2, 2, vec![0.0; 4], vec![0.0; 8]), 16, 16, 8, &DecodeConfig::default());
    assert!(kps.is_empty());
}

fn mixed_net(dim: usize) -> Network {
    let spec = NetworkSpec::mixed_precision().with_widths([8, 16, 24, 32], 32, dim);
    Network::from_store(&random_store(&spec, 5, &fixture_image()).unwrap()).unwrap()
}

#[test]
fn binary_extraction_has_constant_weight() {
    let net = mixed_net(512);
    let cfg = ExtractConfig { kind: DescriptorKind::Binary, k: Some(300), ..Default::default() };
    let det = extract(&net, &noise_image(100, 75, 3), &cfg).unwrap();
    assert!(!det.is_empty());
    let DescriptorPayload::Binary(set) = &det.descriptors else { panic!("binary expected") };
    for i in 0..set.len() {
        assert_eq!(set.row_bits(i).iter().filter(|&&b| b).count(), 300);
    }
    assert!(det.keypoints.iter().all(|k| k.x < 100.0 && k.y < 75.0));
}

#[test]
fn soft_extraction_sums_to_k_and_round_trips() {
    let net = mixed_net(64);
    let cfg = ExtractConfig { kind: DescriptorKind::Soft, k: Some(20), ..Default::default() };
    let det = extract(&net, &noise_image(64, 64, 8), &cfg).unwrap();
    let DescriptorPayload::Soft(values) = &det.descriptors else { panic!("soft expected") };
    for row in values.chunks(64) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 20.0).abs() < 1e-3);
    }
    let back = decode_detection(&encode_detection(&det).unwrap()).unwrap();
    assert_eq!(back.descriptors, det.descriptors);
    assert_eq!(back.keypoints.len(), det.keypoints.len());
}

#[test]
fn invalid_k_is_a_config_error() {
    let net = mixed_net(64);
    let cfg = ExtractConfig { k: Some(64), ..Default::default() };
    assert!(extract(&net, &noise_image(64, 64, 8), &cfg).is_err());
}
