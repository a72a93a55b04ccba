//! Bit-packed Hamming matching.
//!
//! Descriptors are stored as rows of little-endian `u64` words with the bits
//! past `M` kept at zero, so the distance between two rows is the popcount of
//! their XOR summed over whole words.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binnorm::BinaryDescriptor;
use crate::error::MatchError;
use crate::qtensor::{tail_mask, words_for_bits};

/// Queries processed together against the reference set.
const QUERY_BLOCK: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorSet {
    dim: usize,
    words_per_row: usize,
    words: Vec<u64>,
    popcounts: Option<Vec<u32>>,
    constant_weight: Option<usize>,
}

impl DescriptorSet {
    /// Builds a set from packed words, `words_per_row = ceil(dim / 64)` per row.
    pub fn from_words(dim: usize, words: Vec<u64>) -> Result<Self, MatchError> {
        if dim == 0 {
            return Err(MatchError::InvalidSet("descriptor dimension must be positive".into()));
        }
        let wpr = words_for_bits(dim);
        if words.len() % wpr != 0 {
            return Err(MatchError::InvalidSet(format!(
                "{} words is not a multiple of {wpr} words per row",
                words.len()
            )));
        }
        let mask = tail_mask(dim);
        if let Some(r) = words.chunks(wpr).position(|row| row[wpr - 1] & !mask != 0) {
            return Err(MatchError::InvalidSet(format!(
                "row {r} has bits set beyond dimension {dim}"
            )));
        }
        Ok(DescriptorSet {
            dim,
            words_per_row: wpr,
            words,
            popcounts: None,
            constant_weight: None,
        })
    }

    pub fn from_bits(dim: usize, rows: &[Vec<bool>]) -> Result<Self, MatchError> {
        let wpr = words_for_bits(dim.max(1));
        let mut words = vec![0u64; rows.len() * wpr];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(MatchError::DimensionMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            for (i, &b) in row.iter().enumerate() {
                if b {
                    words[r * wpr + i / 64] |= 1 << (i % 64);
                }
            }
        }
        Self::from_words(dim, words)
    }

    /// Rows of `dim.div_ceil(8)` bytes; bit `j` of byte `i` is descriptor bit `8i + j`.
    pub fn from_bytes(dim: usize, bytes: &[u8]) -> Result<Self, MatchError> {
        let bpr = dim.div_ceil(8);
        if dim == 0 || bytes.len() % bpr != 0 {
            return Err(MatchError::InvalidSet(format!(
                "{} bytes is not a whole number of {bpr}-byte rows",
                bytes.len()
            )));
        }
        let wpr = words_for_bits(dim);
        let n = bytes.len() / bpr;
        let mut words = vec![0u64; n * wpr];
        for (r, row) in bytes.chunks(bpr).enumerate() {
            for (i, &byte) in row.iter().enumerate() {
                words[r * wpr + i / 8] |= (byte as u64) << (8 * (i % 8));
            }
        }
        Self::from_words(dim, words)
    }

    pub fn from_descriptors(descs: &[BinaryDescriptor]) -> Result<Self, MatchError> {
        let dim = match descs.first() {
            Some(d) => d.dim(),
            None => return Err(MatchError::InvalidSet("no descriptors".into())),
        };
        let mut words = Vec::with_capacity(descs.len() * words_for_bits(dim));
        for d in descs {
            if d.dim() != dim {
                return Err(MatchError::DimensionMismatch {
                    left: dim,
                    right: d.dim(),
                });
            }
            words.extend_from_slice(d.words());
        }
        Self::from_words(dim, words)
    }

    /// An empty set of the given dimension.
    pub fn empty(dim: usize) -> Result<Self, MatchError> {
        Self::from_words(dim, Vec::new())
    }

    pub fn random(n: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wpr = words_for_bits(dim);
        let mask = tail_mask(dim);
        let mut words: Vec<u64> = (0..n * wpr).map(|_| rng.random()).collect();
        for row in words.chunks_mut(wpr) {
            row[wpr - 1] &= mask;
        }
        DescriptorSet {
            dim,
            words_per_row: wpr,
            words,
            popcounts: None,
            constant_weight: None,
        }
    }

    /// Caches the popcount of each row.
    pub fn with_popcounts(mut self) -> Self {
        self.popcounts = Some(
            self.words
                .chunks(self.words_per_row)
                .map(|r| r.iter().map(|w| w.count_ones()).sum())
                .collect(),
        );
        self
    }

    /// Declares and verifies that every row has exactly `k` set bits.
    pub fn with_constant_weight(self, k: usize) -> Result<Self, MatchError> {
        let set = if self.popcounts.is_some() { self } else { self.with_popcounts() };
        if let Some((i, &c)) = set
            .popcounts
            .as_ref()
            .and_then(|p| p.iter().enumerate().find(|(_, &c)| c as usize != k))
        {
            return Err(MatchError::InvalidSet(format!(
                "row {i} has {c} set bits, declared constant weight is {k}"
            )));
        }
        Ok(DescriptorSet {
            constant_weight: Some(k),
            ..set
        })
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.words_per_row
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn popcounts(&self) -> Option<&[u32]> {
        self.popcounts.as_deref()
    }

    pub fn constant_weight(&self) -> Option<usize> {
        self.constant_weight
    }

    /// Packs row `i` as `dim.div_ceil(8)` bytes.
    pub fn row_bytes(&self, i: usize) -> Vec<u8> {
        let bpr = self.dim.div_ceil(8);
        self.row(i)
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(bpr)
            .collect()
    }

    pub fn row_bits(&self, i: usize) -> Vec<bool> {
        let r = self.row(i);
        (0..self.dim).map(|b| (r[b / 64] >> (b % 64)) & 1 == 1).collect()
    }
}

/// Hamming distance of two equally sized word rows.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

pub fn hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> Result<u32, MatchError> {
    if a.dim() != b.dim() {
        return Err(MatchError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(hamming_words(a.words(), b.words()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    MutualNn,
    NnWithThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub query: usize,
    pub reference: usize,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Sorted by query index.
    pub pairs: Vec<Match>,
    pub policy: MatchPolicy,
}

/// `(distance, index)` packed so that integer `min` is the lexicographic
/// minimum: the closest row wins, ties go to the lowest index.
#[inline]
fn key(d: u32, idx: usize) -> u64 {
    ((d as u64) << 32) | idx as u64
}

#[inline]
fn unkey(k: u64) -> (u32, usize) {
    ((k >> 32) as u32, (k & 0xffff_ffff) as usize)
}

#[inline(always)]
fn scan_block_fixed<const W: usize>(
    q: &[u64],
    d: &[u64],
    q_best: &mut [u64],
    d_best: &mut [u64],
    q0: usize,
) {
    for (j, drow) in d.chunks_exact(W).enumerate() {
        let drow: &[u64; W] = drow.try_into().unwrap();
        let mut col = d_best[j];
        for (i, qrow) in q.chunks_exact(W).enumerate() {
            let mut dist = 0u32;
            for w in 0..W {
                dist += (qrow[w] ^ drow[w]).count_ones();
            }
            q_best[i] = q_best[i].min(key(dist, j));
            col = col.min(key(dist, q0 + i));
        }
        d_best[j] = col;
    }
}

#[inline(always)]
fn scan_block_dyn(
    wpr: usize,
    q: &[u64],
    d: &[u64],
    q_best: &mut [u64],
    d_best: &mut [u64],
    q0: usize,
) {
    for (j, drow) in d.chunks_exact(wpr).enumerate() {
        let mut col = d_best[j];
        for (i, qrow) in q.chunks_exact(wpr).enumerate() {
            let dist = hamming_words(qrow, drow);
            q_best[i] = q_best[i].min(key(dist, j));
            col = col.min(key(dist, q0 + i));
        }
        d_best[j] = col;
    }
}

#[inline(always)]
fn scan_block(wpr: usize, q: &[u64], d: &[u64], q_best: &mut [u64], d_best: &mut [u64], q0: usize) {
    match wpr {
        1 => scan_block_fixed::<1>(q, d, q_best, d_best, q0),
        2 => scan_block_fixed::<2>(q, d, q_best, d_best, q0),
        4 => scan_block_fixed::<4>(q, d, q_best, d_best, q0),
        8 => scan_block_fixed::<8>(q, d, q_best, d_best, q0),
        _ => scan_block_dyn(wpr, q, d, q_best, d_best, q0),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
fn scan_block_popcnt(wpr: usize, q: &[u64], d: &[u64], q_best: &mut [u64], d_best: &mut [u64], q0: usize) {
    scan_block(wpr, q, d, q_best, d_best, q0)
}

fn scan(wpr: usize, q: &[u64], d: &[u64], q_best: &mut [u64], d_best: &mut [u64], q0: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("popcnt") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { scan_block_popcnt(wpr, q, d, q_best, d_best, q0) };
        return;
    }
    scan_block(wpr, q, d, q_best, d_best, q0)
}

/// Nearest reference for every query and nearest query for every reference.
fn best_both_ways(q: &DescriptorSet, d: &DescriptorSet) -> (Vec<u64>, Vec<u64>) {
    let wpr = q.words_per_row;
    let nd = d.len();
    let blocks: Vec<(Vec<u64>, Vec<u64>)> = q
        .words
        .par_chunks(QUERY_BLOCK * wpr)
        .enumerate()
        .map(|(b, qblock)| {
            let mut q_best = vec![u64::MAX; qblock.len() / wpr];
            let mut d_best = vec![u64::MAX; nd];
            scan(wpr, qblock, &d.words, &mut q_best, &mut d_best, b * QUERY_BLOCK);
            (q_best, d_best)
        })
        .collect();
    let mut q_best = Vec::with_capacity(q.len());
    let mut d_best = vec![u64::MAX; nd];
    for (qb, db) in blocks {
        q_best.extend(qb);
        for (a, b) in d_best.iter_mut().zip(db) {
            *a = (*a).min(b);
        }
    }
    (q_best, d_best)
}

fn check_dims(q: &DescriptorSet, d: &DescriptorSet) -> Result<(), MatchError> {
    if q.dim != d.dim {
        return Err(MatchError::DimensionMismatch {
            left: q.dim,
            right: d.dim,
        });
    }
    Ok(())
}

/// Mutual nearest-neighbour matching: `(i, j)` is kept when each is the
/// other's closest row (lowest index on ties) and the distance is at most
/// `max_dist`.
pub fn match_mutual_nn(q: &DescriptorSet, d: &DescriptorSet, max_dist: u32) -> Result<MatchResult, MatchError> {
    check_dims(q, d)?;
    let mut pairs = Vec::new();
    if !q.is_empty() && !d.is_empty() {
        let (q_best, d_best) = best_both_ways(q, d);
        for (i, &k) in q_best.iter().enumerate() {
            let (dist, j) = unkey(k);
            if dist <= max_dist && unkey(d_best[j]).1 == i {
                pairs.push(Match {
                    query: i,
                    reference: j,
                    distance: dist,
                });
            }
        }
    }
    Ok(MatchResult {
        pairs,
        policy: MatchPolicy::MutualNn,
    })
}

/// One-directional nearest neighbour with a distance threshold.
pub fn match_nn(q: &DescriptorSet, d: &DescriptorSet, max_dist: u32) -> Result<MatchResult, MatchError> {
    check_dims(q, d)?;
    let mut pairs = Vec::new();
    if !q.is_empty() && !d.is_empty() {
        let (q_best, _) = best_both_ways(q, d);
        for (i, &k) in q_best.iter().enumerate() {
            let (dist, j) = unkey(k);
            if dist <= max_dist {
                pairs.push(Match {
                    query: i,
                    reference: j,
                    distance: dist,
                });
            }
        }
    }
    Ok(MatchResult {
        pairs,
        policy: MatchPolicy::NnWithThreshold,
    })
}

/// Bit-at-a-time reference implementations, kept for validation and as the
/// baseline in throughput comparisons.
pub mod naive {
    use super::{Match, MatchPolicy, MatchResult};
    use super::DescriptorSet;
    use crate::error::MatchError;

    pub fn hamming_bits(a: &[u64], b: &[u64], dim: usize) -> u32 {
        let mut d = 0;
        for i in 0..dim {
            let x = (a[i / 64] >> (i % 64)) & 1;
            let y = (b[i / 64] >> (i % 64)) & 1;
            if x != y {
                d += 1;
            }
        }
        d
    }

    pub fn match_mutual_nn(q: &DescriptorSet, d: &DescriptorSet, max_dist: u32) -> Result<MatchResult, MatchError> {
        super::check_dims(q, d)?;
        let dim = q.dim();
        let dist: Vec<Vec<u32>> = (0..q.len())
            .map(|i| (0..d.len()).map(|j| hamming_bits(q.row(i), d.row(j), dim)).collect())
            .collect();
        let mut pairs = Vec::new();
        for i in 0..q.len() {
            let mut best_j = None;
            for j in 0..d.len() {
                if best_j.is_none_or(|b: usize| dist[i][j] < dist[i][b]) {
                    best_j = Some(j);
                }
            }
            let Some(j) = best_j else { continue };
            let mut best_i = 0;
            for ii in 0..q.len() {
                if dist[ii][j] < dist[best_i][j] {
                    best_i = ii;
                }
            }
            if best_i == i && dist[i][j] <= max_dist {
                pairs.push(Match {
                    query: i,
                    reference: j,
                    distance: dist[i][j],
                });
            }
        }
        Ok(MatchResult {
            pairs,
            policy: MatchPolicy::MutualNn,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_query: usize,
    pub n_reference: usize,
    pub dim: usize,
    pub repetitions: usize,
    pub warmup_runs: usize,
    pub latencies_ms: Vec<f64>,
    pub median_latency_ms: f64,
    pub pairs_per_second: f64,
    pub distance_computations: u64,
    pub matches: usize,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repetitions` mutual-NN runs after one discarded warm-up run.
pub fn bench_sets(
    q: &DescriptorSet,
    d: &DescriptorSet,
    repetitions: usize,
    bit_loop: bool,
) -> Result<BenchReport, MatchError> {
    let run = || {
        if bit_loop {
            naive::match_mutual_nn(q, d, q.dim() as u32)
        } else {
            match_mutual_nn(q, d, q.dim() as u32)
        }
    };
    let warm = run()?;
    let reps = repetitions.max(1);
    let mut latencies = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(run()?);
        latencies.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let med = median(&latencies);
    let pairs = (q.len() * d.len()) as u64;
    Ok(BenchReport {
        n_query: q.len(),
        n_reference: d.len(),
        dim: q.dim(),
        repetitions: reps,
        warmup_runs: 1,
        pairs_per_second: if med > 0.0 { pairs as f64 / (med / 1e3) } else { f64::INFINITY },
        latencies_ms: latencies,
        median_latency_ms: med,
        distance_computations: pairs,
        matches: warm.pairs.len(),
    })
}

/// Benchmarks matching on random sets of the given size.
pub fn bench_match(n_q: usize, n_d: usize, dim: usize, repetitions: usize, seed: u64) -> Result<BenchReport, MatchError> {
    if dim == 0 {
        return Err(MatchError::InvalidSet("descriptor dimension must be positive".into()));
    }
    let q = DescriptorSet::random(n_q, dim, seed);
    let d = DescriptorSet::random(n_d, dim, seed.wrapping_add(1));
    bench_sets(&q, &d, repetitions, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binnorm::top_k_threshold;
    use proptest::prelude::*;

    fn complement(s: &DescriptorSet, i: usize) -> Vec<bool> {
        s.row_bits(i).into_iter().map(|b| !b).collect()
    }

    #[test]
    fn hamming_identity_and_complement() {
        let s = DescriptorSet::random(1, 256, 3);
        let c = DescriptorSet::from_bits(256, &[complement(&s, 0)]).unwrap();
        assert_eq!(hamming_words(s.row(0), s.row(0)), 0);
        assert_eq!(hamming_words(s.row(0), c.row(0)), 256);
        let a = top_k_threshold(&[1.0f64, 0.0, 0.0], 1).unwrap();
        let b = top_k_threshold(&[0.0f64; 4], 1).unwrap();
        assert!(matches!(hamming(&a, &b), Err(MatchError::DimensionMismatch { .. })));
    }

    #[test]
    fn word_distance_matches_bit_loop() {
        for dim in [1usize, 63, 64, 65, 200, 256] {
            let s = DescriptorSet::random(20, dim, dim as u64);
            for i in 0..20 {
                for j in 0..20 {
                    assert_eq!(hamming_words(s.row(i), s.row(j)), naive::hamming_bits(s.row(i), s.row(j), dim));
                }
            }
        }
    }

    #[test]
    fn identical_sets_pair_identically() {
        let s = DescriptorSet::random(50, 256, 4);
        let r = match_mutual_nn(&s, &s, 256).unwrap();
        assert_eq!(r.pairs.len(), 50);
        assert!(r.pairs.iter().enumerate().all(|(i, m)| m.query == i && m.reference == i && m.distance == 0));
    }

    #[test]
    fn equidistant_tie_goes_to_lowest_index() {
        let q = DescriptorSet::from_bits(4, &[vec![false; 4]]).unwrap();
        let d = DescriptorSet::from_bits(
            4,
            &[vec![true, true, true, true], vec![true, false, false, false], vec![false, true, false, false]],
        )
        .unwrap();
        let r = match_mutual_nn(&q, &d, 4).unwrap();
        assert_eq!(r.pairs, vec![Match { query: 0, reference: 1, distance: 1 }]);
        let r = match_mutual_nn(&q, &d, 0).unwrap();
        assert!(r.pairs.is_empty());
    }

    #[test]
    fn random_sets_match_oracle() {
        for (nq, nd, dim) in [(200, 300, 256), (70, 33, 100), (1, 5, 64), (40, 40, 8)] {
            let q = DescriptorSet::random(nq, dim, 7);
            let d = DescriptorSet::random(nd, dim, 8);
            assert_eq!(match_mutual_nn(&q, &d, dim as u32).unwrap(), naive::match_mutual_nn(&q, &d, dim as u32).unwrap());
            let t = dim as u32 / 3;
            assert_eq!(match_mutual_nn(&q, &d, t).unwrap(), naive::match_mutual_nn(&q, &d, t).unwrap());
        }
    }

    #[test]
    fn empty_and_mismatched_sets() {
        let e = DescriptorSet::empty(256).unwrap();
        let s = DescriptorSet::random(3, 256, 1);
        assert!(match_mutual_nn(&e, &s, 256).unwrap().pairs.is_empty());
        assert!(match_mutual_nn(&s, &e, 256).unwrap().pairs.is_empty());
        let t = DescriptorSet::random(3, 128, 1);
        assert!(matches!(match_mutual_nn(&s, &t, 256), Err(MatchError::DimensionMismatch { .. })));
    }

    #[test]
    fn constant_weight_contract() {
        let rows: Vec<Vec<bool>> = (0..5).map(|i| (0..16).map(|b| (b + i) % 4 == 0).collect()).collect();
        let s = DescriptorSet::from_bits(16, &rows).unwrap();
        let s = s.with_constant_weight(4).unwrap();
        assert_eq!(s.constant_weight(), Some(4));
        assert!(s.clone().with_constant_weight(3).is_err());
        for i in 0..5 {
            for j in 0..5 {
                assert!(hamming_words(s.row(i), s.row(j)) <= 8);
            }
        }
    }

    #[test]
    fn byte_round_trip_and_dirty_padding() {
        let s = DescriptorSet::random(4, 100, 9);
        let bytes: Vec<u8> = (0..4).flat_map(|i| s.row_bytes(i)).collect();
        assert_eq!(DescriptorSet::from_bytes(100, &bytes).unwrap(), s);
        assert!(DescriptorSet::from_words(100, vec![0, 1 << 40]).is_err());
    }

    #[test]
    fn bench_accounting() {
        let r = bench_match(1, 1, 256, 1, 0).unwrap();
        assert_eq!(r.latencies_ms.len(), 1);
        assert_eq!(r.warmup_runs, 1);
        let a = bench_match(10, 20, 256, 1, 0).unwrap();
        let b = bench_match(20, 20, 256, 1, 0).unwrap();
        assert_eq!(b.distance_computations, 2 * a.distance_computations);
    }

    proptest! {
        #[test]
        fn metric_axioms(seed in any::<u64>(), dim in 1usize..300) {
            let s = DescriptorSet::random(3, dim, seed);
            let (a, b, c) = (s.row(0), s.row(1), s.row(2));
            prop_assert_eq!(hamming_words(a, a), 0);
            prop_assert_eq!(hamming_words(a, b), hamming_words(b, a));
            prop_assert!(hamming_words(a, c) <= hamming_words(a, b) + hamming_words(b, c));
            prop_assert!(hamming_words(a, b) as usize <= dim);
        }

        #[test]
        fn permutation_invariance(seed in any::<u64>(), shift in 1usize..30) {
            let q = DescriptorSet::random(30, 64, seed);
            let d = DescriptorSet::random(40, 64, seed ^ 0xabc);
            let perm: Vec<usize> = (0..40).map(|j| (j + shift) % 40).collect();
            let words: Vec<u64> = perm.iter().flat_map(|&j| d.row(j).to_vec()).collect();
            let dp = DescriptorSet::from_words(64, words).unwrap();
            let a = match_mutual_nn(&q, &d, 64).unwrap();
            let b = match_mutual_nn(&q, &dp, 64).unwrap();
            // Only compare matches whose distance is unique in its row and column.
            let unique = |m: &Match| {
                (0..40).filter(|&j| hamming_words(q.row(m.query), d.row(j)) == m.distance).count() == 1
                    && (0..30).filter(|&i| hamming_words(q.row(i), d.row(m.reference)) == m.distance).count() == 1
            };
            let sa: Vec<(usize, usize)> = a.pairs.iter().filter(|m| unique(m)).map(|m| (m.query, m.reference)).collect();
            let sb: Vec<(usize, usize)> = b.pairs.iter().map(|m| (m.query, perm[m.reference])).collect();
            for p in &sa {
                prop_assert!(sb.contains(p));
            }
        }
    }
}
