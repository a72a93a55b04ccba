//! Binary descriptor normalization.
//!
//! A descriptor of `M` logits `x` is projected onto the polytope
//! `{ y in [0,1]^M : sum(y) = k }` with an entropy regularizer, which has the
//! closed form `y = sigmoid(x + nu)` where `nu` is the unique root of
//! `g(nu) = sum_i sigmoid(x_i + nu) - k`. At inference the projection is
//! replaced by top-k thresholding, which produces constant-weight codes.

use rayon::prelude::*;

use crate::error::BinNormError;
use crate::qtensor::{BitTensor, Shape};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 200;
pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_K: usize = 128;

/// Bracket expansions allowed before giving up. Each doubles the width, so
/// this covers any finite shift representable in f64.
const MAX_EXPANSIONS: usize = 1100;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftDescriptor {
    /// Logits before projection.
    pub x: Vec<f64>,
    /// Projected values in (0, 1).
    pub y: Vec<f64>,
    /// Dual variable enforcing the sum constraint.
    pub nu: f64,
    pub k: usize,
    /// `sum(y) - k` at the returned `nu`.
    pub residual: f64,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn validate(x: &[f64], k: usize) -> Result<(), BinNormError> {
    let m = x.len();
    if m < 2 || k == 0 || k >= m {
        return Err(BinNormError::InvalidParameter(format!(
            "k must satisfy 1 <= k <= M-1, got k = {k}, M = {m}"
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(BinNormError::InvalidInput(format!(
            "logit {i} is not finite ({})",
            x[i]
        )));
    }
    Ok(())
}

fn g(x: &[f64], nu: f64, k: usize) -> f64 {
    x.iter().map(|&v| sigmoid(v + nu)).sum::<f64>() - k as f64
}

/// Solves for `nu` by bracketing and bisection and returns the projection.
///
/// The initial bracket is `[-max(x) - logit(k/M) - 1, -min(x) + logit(k/M) + 1]`;
/// each end is pushed outward geometrically until `g` changes sign, then the
/// interval is bisected until `|g| <= tol` or `MAX_ITERATIONS` is reached.
pub fn project(x: &[f64], k: usize, tol: f64) -> Result<SoftDescriptor, BinNormError> {
    validate(x, k)?;
    if !(tol > 0.0) {
        return Err(BinNormError::InvalidParameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let m = x.len();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let l = (k as f64 / (m - k) as f64).ln();
    let mut lo = -max - l - 1.0;
    let mut hi = -min + l + 1.0;
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }

    let mut step = (hi - lo).max(1.0);
    let mut g_lo = g(x, lo, k);
    let mut expansions = 0;
    while g_lo > 0.0 {
        hi = lo;
        lo -= step;
        step *= 2.0;
        g_lo = g(x, lo, k);
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(BinNormError::InvalidInput("failed to bracket the dual root".into()));
        }
    }
    let mut step = (hi - lo).max(1.0);
    let mut g_hi = g(x, hi, k);
    while g_hi < 0.0 {
        lo = hi;
        hi += step;
        step *= 2.0;
        g_hi = g(x, hi, k);
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(BinNormError::InvalidInput("failed to bracket the dual root".into()));
        }
    }

    let (mut nu, mut r) = if g_lo.abs() <= g_hi.abs() { (lo, g_lo) } else { (hi, g_hi) };
    let mut iterations = 0;
    while r.abs() > tol && iterations < MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(x, mid, k);
        if gm.abs() < r.abs() {
            nu = mid;
            r = gm;
        }
        if gm > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    let y: Vec<f64> = x.iter().map(|&v| sigmoid(v + nu)).collect();
    let residual = y.iter().sum::<f64>() - k as f64;
    Ok(SoftDescriptor {
        x: x.to_vec(),
        y,
        nu,
        k,
        residual,
    })
}

/// Projects every descriptor of a row-major `n x m` batch.
pub fn project_batch(
    logits: &[f64],
    m: usize,
    k: usize,
    tol: f64,
) -> Result<Vec<SoftDescriptor>, BinNormError> {
    if m == 0 || logits.len() % m != 0 {
        return Err(BinNormError::InvalidInput(format!(
            "batch of {} values is not a multiple of M = {m}",
            logits.len()
        )));
    }
    logits.par_chunks(m).map(|row| project(row, k, tol)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad {
    pub grad_x: Vec<f64>,
    /// True when every output is saturated and the gradient was zeroed.
    pub saturated: bool,
}

/// Backward pass through the projection by implicit differentiation of the
/// sum constraint: `dx_i = s_i * (g_i - sum_j g_j s_j / sum_l s_l)` with
/// `s_i = y_i (1 - y_i)`.
pub fn project_backward(desc: &SoftDescriptor, grad_y: &[f64]) -> Result<ProjectionGrad, BinNormError> {
    if grad_y.len() != desc.y.len() {
        return Err(BinNormError::InvalidInput(format!(
            "gradient has {} entries, descriptor has {}",
            grad_y.len(),
            desc.y.len()
        )));
    }
    let s: Vec<f64> = desc.y.iter().map(|&y| y * (1.0 - y)).collect();
    let total: f64 = s.iter().sum();
    if total < 1e-30 {
        return Ok(ProjectionGrad {
            grad_x: vec![0.0; s.len()],
            saturated: true,
        });
    }
    // Centering on the first entry makes a uniform upstream gradient vanish exactly.
    let g0 = grad_y.first().copied().unwrap_or(0.0);
    let mean = g0 + s.iter().zip(grad_y).map(|(&si, &gi)| si * (gi - g0)).sum::<f64>() / total;
    let grad_x = s.iter().zip(grad_y).map(|(&si, &gi)| si * (gi - mean)).collect();
    Ok(ProjectionGrad {
        grad_x,
        saturated: false,
    })
}

/// A constant-weight binary code: exactly `weight` of its `M` bits are set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDescriptor {
    pub bits: BitTensor,
    pub weight: usize,
}

impl BinaryDescriptor {
    pub fn dim(&self) -> usize {
        self.bits.shape().c()
    }

    pub fn words(&self) -> &[u64] {
        self.bits.words()
    }

    pub fn to_bits(&self) -> Vec<bool> {
        self.bits.to_bits()
    }
}

/// Indices of the `k` largest values, ordered by value descending and then
/// index ascending, so ties go to the lowest index.
pub fn top_k_indices<T: Copy + Into<f64>>(x: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| {
        let (va, vb): (f64, f64) = (x[a].into(), x[b].into());
        vb.total_cmp(&va).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Sets the bits of the `k` largest logits.
pub fn top_k_threshold<T: Copy + Into<f64>>(x: &[T], k: usize) -> Result<BinaryDescriptor, BinNormError> {
    let m = x.len();
    if k == 0 || k > m {
        return Err(BinNormError::InvalidParameter(format!(
            "k must satisfy 1 <= k <= M, got k = {k}, M = {m}"
        )));
    }
    let mut bits = vec![false; m];
    for i in top_k_indices(x, k) {
        bits[i] = true;
    }
    let bits = BitTensor::from_bits(Shape::new(1, 1, 1, m), &bits)
        .map_err(|e| BinNormError::InvalidInput(e.to_string()))?;
    let weight = bits.count_ones() as usize;
    Ok(BinaryDescriptor { bits, weight })
}

/// True when the value at rank `k-1` is strictly larger than the value at
/// rank `k`, i.e. the top-k set is unambiguous.
pub fn has_strict_boundary(x: &[f64], k: usize) -> bool {
    if k == 0 || k >= x.len() {
        return true;
    }
    let order = top_k_indices(x, k + 1);
    x[order[k - 1]] > x[order[k]]
}

/// Fraction of samples whose `k` largest projected values sit exactly at the
/// indices chosen by top-k thresholding. Samples with a tie at the boundary
/// are skipped; returns `None` when no sample qualifies.
pub fn agreement(samples: &[Vec<f64>], k: usize, tol: f64) -> Result<Option<f64>, BinNormError> {
    let mut considered = 0usize;
    let mut agreed = 0usize;
    for x in samples {
        if !has_strict_boundary(x, k) {
            continue;
        }
        let soft = project(x, k, tol)?;
        let mut a = top_k_indices(&soft.y, k);
        let mut b = top_k_indices(x, k);
        a.sort_unstable();
        b.sort_unstable();
        considered += 1;
        if a == b {
            agreed += 1;
        }
    }
    Ok((considered > 0).then(|| agreed as f64 / considered as f64))
}

fn check_unit(name: &str, v: &[f64]) -> Result<(), BinNormError> {
    if let Some(i) = v.iter().position(|t| !(0.0..=1.0).contains(t)) {
        return Err(BinNormError::InvalidInput(format!(
            "{name}[{i}] = {} lies outside [0, 1]",
            v[i]
        )));
    }
    Ok(())
}

/// Soft Hamming distance `sum u_i (1 - v_i) + (1 - u_i) v_i`; equals the
/// integer Hamming distance on 0/1 vectors.
pub fn soft_hamming(u: &[f64], v: &[f64]) -> Result<f64, BinNormError> {
    if u.len() != v.len() {
        return Err(BinNormError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    check_unit("u", u)?;
    check_unit("v", v)?;
    Ok(u.iter().zip(v).map(|(&a, &b)| a * (1.0 - b) + (1.0 - a) * b).sum())
}

/// Hamming triplet loss on soft codes: `max(0, d(a, p) - d(a, n) + margin)`.
pub fn soft_hamming_triplet(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64, BinNormError> {
    let dp = soft_hamming(anchor, positive)?;
    let dn = soft_hamming(anchor, negative)?;
    Ok((dp - dn + margin).max(0.0))
}

/// The sigmoid + L2 descriptor variant: `sigmoid(x) / ||sigmoid(x)||`.
pub fn sigmoid_l2(x: &[f64]) -> Result<Vec<f64>, BinNormError> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(BinNormError::InvalidInput(format!("logit {i} is not finite")));
    }
    let s: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(s);
    }
    Ok(s.into_iter().map(|v| v / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain bisection in f64 on a wide fixed bracket, run to interval collapse.
    fn bisection_oracle(x: &[f64], k: usize) -> f64 {
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let s: f64 = x.iter().map(|&v| 1.0 / (1.0 + (-(v + mid)).exp())).sum();
            if s > k as f64 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn symmetric_zero_input() {
        let d = project(&[0.0; 4], 2, DEFAULT_TOL).unwrap();
        assert_eq!(d.nu, 0.0);
        assert!(d.y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturation_limit() {
        let d = project(&[40.0, 40.0, -40.0, -40.0], 2, DEFAULT_TOL).unwrap();
        for (y, want) in d.y.iter().zip([1.0, 1.0, 0.0, 0.0]) {
            assert!((y - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_bisection() {
        let x = [1.0, 0.5, -0.5, -1.0];
        let nu = bisection_oracle(&x, 2);
        let d = project(&x, 2, 1e-13).unwrap();
        assert!((d.nu - nu).abs() < 1e-8);
        for (y, xi) in d.y.iter().zip(x) {
            assert!((y - sigmoid(xi + nu)).abs() < 1e-8);
        }
    }

    #[test]
    fn small_k_needs_bracket_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-0.01..0.01)).collect();
        let d = project(&x, 1, DEFAULT_TOL).unwrap();
        assert!(d.residual.abs() <= DEFAULT_TOL);
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(project(&[0.0; 4], 0, 1e-9), Err(BinNormError::InvalidParameter(_))));
        assert!(matches!(project(&[0.0; 4], 4, 1e-9), Err(BinNormError::InvalidParameter(_))));
        assert!(matches!(project(&[0.0, f64::NAN], 1, 1e-9), Err(BinNormError::InvalidInput(_))));
        assert!(matches!(top_k_threshold(&[0.0f64; 4], 5), Err(BinNormError::InvalidParameter(_))));
    }

    #[test]
    fn uniform_gradient_is_annihilated() {
        let d = project(&[0.3, -1.2, 2.0, 0.1, 0.7], 2, DEFAULT_TOL).unwrap();
        let gx = project_backward(&d, &[0.37; 5]).unwrap();
        assert!(gx.grad_x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gradient_is_flagged() {
        let d = project(&[800.0, 800.0, -800.0, -800.0], 2, DEFAULT_TOL).unwrap();
        let gx = project_backward(&d, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(gx.saturated);
        assert!(gx.grad_x.iter().all(|&v| v == 0.0));
    }

    fn fd_relative_error(x: &[f64], k: usize, gy: &[f64]) -> f64 {
        let h = 1e-5;
        let d = project(x, k, 1e-13).unwrap();
        let analytic = project_backward(&d, gy).unwrap().grad_x;
        let loss = |v: &[f64]| -> f64 {
            project(v, k, 1e-13).unwrap().y.iter().zip(gy).map(|(a, b)| a * b).sum()
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den += fd.powi(2).max(analytic[i].powi(2));
        }
        num.sqrt() / den.sqrt().max(1e-300)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        assert!(fd_relative_error(&[0.8, 0.8, -0.8, -0.8], 2, &[1.0, 0.0, 0.0, 0.0]) < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gy: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(fd_relative_error(&x, rng.random_range(1..32), &gy) < 1e-4);
        }
    }

    #[test]
    fn top_k_examples() {
        let d = top_k_threshold(&[0.9f64, 0.1, 0.8, 0.2], 2).unwrap();
        assert_eq!(d.to_bits(), vec![true, false, true, false]);
        let d = top_k_threshold(&[0.5f64; 5], 3).unwrap();
        assert_eq!(d.to_bits(), vec![true, true, true, false, false]);
        assert_eq!(d.weight, 3);
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..=256);
            let mut sorted: Vec<(f64, usize)> = x.iter().copied().zip(0..).collect();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want = vec![false; 256];
            for &(_, i) in &sorted[..k] {
                want[i] = true;
            }
            let d = top_k_threshold(&x, k).unwrap();
            assert_eq!(d.to_bits(), want);
            assert_eq!(d.weight, k);
        }
    }

    #[test]
    fn agreement_on_decreasing_and_random() {
        let x: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        let d = project(&x, 3, DEFAULT_TOL).unwrap();
        let mut idx = top_k_indices(&d.y, 3);
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..64).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        assert_eq!(agreement(&samples, 32, DEFAULT_TOL).unwrap(), Some(1.0));
        assert_eq!(agreement(&[vec![1.0, 0.5, 0.5, 0.0]], 2, DEFAULT_TOL).unwrap(), None);
    }

    #[test]
    fn soft_hamming_examples() {
        let a = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(soft_hamming(&a, &[0.0, 0.0, 1.0, 1.0]).unwrap(), 4.0);
        assert_eq!(soft_hamming_triplet(&a, &a, &[0.0, 0.0, 1.0, 1.0], 0.0).unwrap(), 0.0);
        assert!(soft_hamming(&[1.5], &[0.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let v: Vec<[f64; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let (a, p, n): (Vec<f64>, Vec<f64>, Vec<f64>) = (
                v.iter().map(|t| t[0]).collect(),
                v.iter().map(|t| t[1]).collect(),
                v.iter().map(|t| t[2]).collect(),
            );
            let mut dp = 0.0;
            let mut dn = 0.0;
            for i in 0..16 {
                dp += a[i] * (1.0 - p[i]) + (1.0 - a[i]) * p[i];
                dn += a[i] * (1.0 - n[i]) + (1.0 - a[i]) * n[i];
            }
            let want = f64::max(0.0, dp - dn + 0.5);
            assert!((soft_hamming_triplet(&a, &p, &n, 0.5).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_l2_has_unit_norm() {
        let v = sigmoid_l2(&[0.1, -2.0, 3.0]).unwrap();
        assert!((v.iter().map(|t| t * t).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_in_each_logit(
            x in prop::collection::vec(-5.0f64..5.0, 8),
            k in 1usize..8,
            i in 0usize..8,
            delta in 0.0f64..3.0,
        ) {
            let base = project(&x, k, 1e-12).unwrap();
            let mut bumped = x.clone();
            bumped[i] += delta;
            let up = project(&bumped, k, 1e-12).unwrap();
            prop_assert!(up.y[i] >= base.y[i] - 1e-10);
        }

        #[test]
        fn shift_invariant(x in prop::collection::vec(-5.0f64..5.0, 16), k in 1usize..16, c in -20.0f64..20.0) {
            let a = project(&x, k, 1e-12).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = project(&shifted, k, 1e-12).unwrap();
            for (p, q) in a.y.iter().zip(&b.y) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
