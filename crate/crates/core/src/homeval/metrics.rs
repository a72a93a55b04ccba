//! Detector and descriptor metrics for image pairs related by a homography.
//!
//! Keypoints are restricted to the shared visible region: a keypoint of view
//! A counts only if its warp lands inside view B, and vice versa. Distances
//! from A to B are measured in B's frame and distances from B to A in A's
//! frame, which makes every metric symmetric under swapping the views and
//! inverting the homography.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, GeometryError};
use crate::homeval::homography::{estimate_homography, homography_accuracy, Homography, Point, RansacConfig};
use crate::imageio::Image;
use crate::matcher::{match_mutual_nn, DescriptorSet, Match};

pub const DEFAULT_EPS_PX: f64 = 3.0;
pub const DEFAULT_KEYPOINT_BUDGET: usize = 300;
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub fn of(img: &Image) -> Self {
        Dims {
            width: img.width(),
            height: img.height(),
        }
    }

    fn contains(&self, p: Point) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64
    }
}

/// Points of one view mapped into the other, keeping the original indices of
/// those that land inside the other view.
fn shared(pts: &[Point], h: &Homography, other: Dims) -> Vec<(usize, Point)> {
    pts.iter()
        .enumerate()
        .filter_map(|(i, &p)| h.warp(p).filter(|q| other.contains(*q)).map(|q| (i, q)))
        .collect()
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityResult {
    /// NaN when no keypoint lies in the shared region.
    pub repeatability: f64,
    /// Mean distance over repeatable keypoints of both views; NaN when none.
    pub localization_error: f64,
    /// Keypoints of both views in the shared region.
    pub shared: usize,
    /// Keypoints of both views with a counterpart within `eps`.
    pub repeatable: usize,
}

/// Per-direction nearest-counterpart statistics: `(repeatable count, sum of distances)`.
fn nearest_within(from: &[(usize, Point)], to: &[Point], eps: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for &(_, p) in from {
        let best = to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
        if best <= eps {
            count += 1;
            sum += best;
        }
    }
    (count, sum)
}

/// Repeatability and localization error of keypoints `a` (view A) and `b`
/// (view B), with `h` mapping A to B.
pub fn repeatability(
    a: &[Point],
    b: &[Point],
    h: &Homography,
    dims_a: Dims,
    dims_b: Dims,
    eps: f64,
) -> Result<RepeatabilityResult, GeometryError> {
    let inv = h.inverse()?;
    let a_in_b = shared(a, h, dims_b);
    let b_in_a = shared(b, &inv, dims_a);
    let a_kept: Vec<Point> = a_in_b.iter().map(|&(i, _)| a[i]).collect();
    let b_kept: Vec<Point> = b_in_a.iter().map(|&(i, _)| b[i]).collect();
    let shared_n = a_in_b.len() + b_in_a.len();
    let (ca, sa) = nearest_within(&a_in_b, &b_kept, eps);
    let (cb, sb) = nearest_within(&b_in_a, &a_kept, eps);
    let repeatable = ca + cb;
    Ok(RepeatabilityResult {
        repeatability: if shared_n == 0 { f64::NAN } else { repeatable as f64 / shared_n as f64 },
        localization_error: if repeatable == 0 { f64::NAN } else { (sa + sb) / repeatable as f64 },
        shared: shared_n,
        repeatable,
    })
}

/// Mean distance between repeatable keypoints, see [`repeatability`].
pub fn localization_error(
    a: &[Point],
    b: &[Point],
    h: &Homography,
    dims_a: Dims,
    dims_b: Dims,
    eps: f64,
) -> Result<f64, GeometryError> {
    Ok(repeatability(a, b, h, dims_a, dims_b, eps)?.localization_error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingScoreResult {
    /// NaN when either view has no keypoint in the shared region.
    pub matching_score: f64,
    pub correct: usize,
    /// `min(|A'|, |B'|)` over the shared region.
    pub denominator: usize,
}

/// Correct matches over the smaller shared keypoint count. A match is
/// correct when both keypoints are in the shared region and the warped
/// query lies within `eps` of the reference.
pub fn matching_score(
    a: &[Point],
    b: &[Point],
    h: &Homography,
    matches: &[Match],
    dims_a: Dims,
    dims_b: Dims,
    eps: f64,
) -> Result<MatchingScoreResult, GeometryError> {
    let inv = h.inverse()?;
    let mut a_shared = vec![None; a.len()];
    for (i, q) in shared(a, h, dims_b) {
        a_shared[i] = Some(q);
    }
    let mut b_shared = vec![false; b.len()];
    let nb = shared(b, &inv, dims_a).into_iter().inspect(|&(j, _)| b_shared[j] = true).count();
    let na = a_shared.iter().filter(|v| v.is_some()).count();
    let denominator = na.min(nb);
    let correct = matches
        .iter()
        .filter(|m| {
            m.query < a.len()
                && m.reference < b.len()
                && b_shared[m.reference]
                && a_shared[m.query].is_some_and(|q| dist(q, b[m.reference]) <= eps)
        })
        .count();
    Ok(MatchingScoreResult {
        matching_score: if denominator == 0 { f64::NAN } else { correct as f64 / denominator as f64 },
        correct,
        denominator,
    })
}

/// Keypoints sorted by descending score with one descriptor row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub keypoints: Vec<Point>,
    pub descriptors: DescriptorSet,
}

impl Features {
    /// Keeps the first `n` keypoints.
    pub fn truncated(&self, n: usize) -> Features {
        let n = n.min(self.keypoints.len());
        let wpr = self.descriptors.words_per_row();
        let words = self.descriptors.words()[..n * wpr].to_vec();
        Features {
            keypoints: self.keypoints[..n].to_vec(),
            descriptors: DescriptorSet::from_words(self.descriptors.dim(), words)
                .expect("prefix of a valid set is valid"),
        }
    }
}

pub trait FeatureDetector: Sync {
    fn detect(&self, image: &Image) -> Result<Features, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub eps_px: f64,
    pub thresholds: Vec<f64>,
    pub keypoint_budget: usize,
    /// Largest accepted Hamming distance; `None` accepts any.
    pub max_dist: Option<u32>,
    pub ransac: RansacConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eps_px: DEFAULT_EPS_PX,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            keypoint_budget: DEFAULT_KEYPOINT_BUDGET,
            max_dist: None,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub repeatability: RepeatabilityResult,
    pub matching: MatchingScoreResult,
    pub matches: usize,
    /// Infinite when no homography could be estimated.
    pub mean_corner_error: f64,
    pub correct: Vec<bool>,
}

/// Aggregate metrics. Means skip undefined (NaN) pair values; the matching
/// counts record how many pairs contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub repeatability: f64,
    pub localization_error: f64,
    pub cor1: f64,
    pub cor3: f64,
    pub cor5: f64,
    pub matching_score: f64,
    pub pairs: usize,
    pub repeatability_count: usize,
    pub localization_count: usize,
    pub matching_count: usize,
}

fn mean_defined(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (if n == 0 { f64::NAN } else { sum / n as f64 }, n)
}

impl MetricReport {
    pub fn aggregate(pairs: &[PairMetrics], thresholds: &[f64]) -> MetricReport {
        let (rep, rc) = mean_defined(pairs.iter().map(|p| p.repeatability.repeatability));
        let (loc, lc) = mean_defined(pairs.iter().map(|p| p.repeatability.localization_error));
        let (ms, mc) = mean_defined(pairs.iter().map(|p| p.matching.matching_score));
        let cor = |t: f64| -> f64 {
            if pairs.is_empty() {
                return f64::NAN;
            }
            let idx = thresholds.iter().position(|&x| x == t);
            let hits = pairs
                .iter()
                .filter(|p| match idx {
                    Some(i) => p.correct.get(i).copied().unwrap_or(false),
                    None => p.mean_corner_error <= t,
                })
                .count();
            hits as f64 / pairs.len() as f64
        };
        MetricReport {
            repeatability: rep,
            localization_error: loc,
            cor1: cor(1.0),
            cor3: cor(3.0),
            cor5: cor(5.0),
            matching_score: ms,
            pairs: pairs.len(),
            repeatability_count: rc,
            localization_count: lc,
            matching_count: mc,
        }
    }

    /// Weighted combination of per-sequence reports by pair count.
    pub fn combine(reports: &[MetricReport]) -> MetricReport {
        let wmean = |f: &dyn Fn(&MetricReport) -> (f64, usize)| -> (f64, usize) {
            let (s, n) = reports
                .iter()
                .map(f)
                .filter(|(v, n)| *n > 0 && !v.is_nan())
                .fold((0.0, 0usize), |(s, t), (v, n)| (s + v * n as f64, t + n));
            (if n == 0 { f64::NAN } else { s / n as f64 }, n)
        };
        let (rep, rc) = wmean(&|r| (r.repeatability, r.repeatability_count));
        let (loc, lc) = wmean(&|r| (r.localization_error, r.localization_count));
        let (ms, mc) = wmean(&|r| (r.matching_score, r.matching_count));
        let (c1, _) = wmean(&|r| (r.cor1, r.pairs));
        let (c3, _) = wmean(&|r| (r.cor3, r.pairs));
        let (c5, _) = wmean(&|r| (r.cor5, r.pairs));
        MetricReport {
            repeatability: rep,
            localization_error: loc,
            cor1: c1,
            cor3: c3,
            cor5: c5,
            matching_score: ms,
            pairs: reports.iter().map(|r| r.pairs).sum(),
            repeatability_count: rc,
            localization_count: lc,
            matching_count: mc,
        }
    }

    /// One `key=value` line per field.
    pub fn to_key_value(&self) -> String {
        format!(
            "repeatability={}\nlocalization_error={}\ncor1={}\ncor3={}\ncor5={}\nmatching_score={}\npairs={}\nrepeatability_count={}\nlocalization_count={}\nmatching_count={}\n",
            self.repeatability,
            self.localization_error,
            self.cor1,
            self.cor3,
            self.cor5,
            self.matching_score,
            self.pairs,
            self.repeatability_count,
            self.localization_count,
            self.matching_count
        )
    }
}

/// Evaluates one pair of views.
pub fn evaluate_pair(
    fa: &Features,
    fb: &Features,
    h: &Homography,
    dims_a: Dims,
    dims_b: Dims,
    cfg: &EvalConfig,
) -> Result<PairMetrics, EvalError> {
    let fa = fa.truncated(cfg.keypoint_budget);
    let fb = fb.truncated(cfg.keypoint_budget);
    let rep = repeatability(&fa.keypoints, &fb.keypoints, h, dims_a, dims_b, cfg.eps_px)?;
    let max_dist = cfg.max_dist.unwrap_or(fa.descriptors.dim() as u32);
    let m = match_mutual_nn(&fa.descriptors, &fb.descriptors, max_dist)
        .map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    let ms = matching_score(&fa.keypoints, &fb.keypoints, h, &m.pairs, dims_a, dims_b, cfg.eps_px)?;
    let corr: Vec<(Point, Point)> = m
        .pairs
        .iter()
        .map(|p| (fa.keypoints[p.query], fb.keypoints[p.reference]))
        .collect();
    let (err, correct) = match estimate_homography(&corr, &cfg.ransac) {
        Ok(est) => {
            let acc = homography_accuracy(&est, h, dims_a.width, dims_a.height, &cfg.thresholds);
            (acc.mean_corner_error, acc.correct)
        }
        Err(_) => (f64::INFINITY, vec![false; cfg.thresholds.len()]),
    };
    Ok(PairMetrics {
        repeatability: rep,
        matching: ms,
        matches: m.pairs.len(),
        mean_corner_error: err,
        correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregate: MetricReport,
}

/// Evaluates every `(image, homography)` pair against the reference image.
/// Pairs run in parallel; results keep the input order.
pub fn run_sequence_eval<D: FeatureDetector + ?Sized>(
    reference: &Image,
    pairs: &[(Image, Homography)],
    detector: &D,
    cfg: &EvalConfig,
) -> Result<SequenceReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::InvalidInput("sequence has no image pairs".into()));
    }
    let fa = detector.detect(reference).map_err(EvalError::Detector)?;
    let dims_a = Dims::of(reference);
    let per_pair: Result<Vec<PairMetrics>, EvalError> = pairs
        .par_iter()
        .map(|(img, h)| {
            let fb = detector.detect(img).map_err(EvalError::Detector)?;
            evaluate_pair(&fa, &fb, h, dims_a, Dims::of(img), cfg)
        })
        .collect();
    let per_pair = per_pair?;
    let aggregate = MetricReport::aggregate(&per_pair, &cfg.thresholds);
    Ok(SequenceReport {
        pairs: per_pair,
        aggregate,
    })
}
