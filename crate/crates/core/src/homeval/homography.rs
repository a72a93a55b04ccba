//! Planar homographies, point warping and robust estimation.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Point = [f64; 2];

/// Points whose projective denominator is at or below this are invalid.
pub const MIN_W: f64 = 1e-12;
pub const MIN_DET: f64 = 1e-12;

/// A 3x3 projective transform normalized so that `h[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Degenerate(f64::NAN));
        }
        let s = m[(2, 2)];
        if s.abs() <= MIN_W {
            return Err(GeometryError::Degenerate(0.0));
        }
        let m = m / s;
        let det = m.determinant();
        if !(det.abs() > MIN_DET) {
            return Err(GeometryError::Degenerate(det));
        }
        Ok(Homography { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Homography { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = tx;
        m[(1, 2)] = ty;
        Homography { m }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self
            .m
            .try_inverse()
            .ok_or(GeometryError::Degenerate(self.m.determinant()))?;
        Self::new(inv)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self, GeometryError> {
        Self::new(self.m * other.m)
    }

    /// Warps one point; `None` when it maps to or behind the line at infinity.
    #[inline]
    pub fn warp(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
        if w <= MIN_W {
            return None;
        }
        Some([
            (m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / w,
            (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / w,
        ])
    }
}

/// Warps every point; invalid points are `None`.
pub fn warp_points(h: &Homography, pts: &[Point]) -> Vec<Option<Point>> {
    pts.iter().map(|&p| h.warp(p)).collect()
}

/// Image corners `(0,0), (w-1,0), (0,h-1), (w-1,h-1)`.
pub fn corners(width: usize, height: usize) -> [Point; 4] {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Mean distance between the image corners warped by `a` and by `b`.
/// Infinite when either warp sends a corner to infinity.
pub fn corner_error(a: &Homography, b: &Homography, width: usize, height: usize) -> f64 {
    let mut total = 0.0;
    for c in corners(width, height) {
        match (a.warp(c), b.warp(c)) {
            (Some(p), Some(q)) => total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerAccuracy {
    pub mean_corner_error: f64,
    pub thresholds: Vec<f64>,
    pub correct: Vec<bool>,
}

/// `correct[i]` holds when the mean corner error is at most `thresholds[i]`.
pub fn homography_accuracy(
    estimated: &Homography,
    truth: &Homography,
    width: usize,
    height: usize,
    thresholds: &[f64],
) -> CornerAccuracy {
    let e = corner_error(estimated, truth, width, height);
    CornerAccuracy {
        mean_corner_error: e,
        thresholds: thresholds.to_vec(),
        correct: thresholds.iter().map(|&t| e <= t).collect(),
    }
}

/// Similarity transform moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[Point]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized direct linear transform over all pairs `(src, dst)`.
pub fn dlt(pairs: &[(Point, Point)]) -> Result<Homography, GeometryError> {
    if pairs.len() < 4 {
        return Err(GeometryError::Estimation(format!(
            "need at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let (ts, td) = match (normalizer(&src), normalizer(&dst)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(GeometryError::Estimation("coincident points".into())),
    };
    // Padding with zero rows keeps the system at least 9x9 so the SVD yields
    // the full right null space.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let [x, y] = apply(&ts, *s);
        let [u, v] = apply(&td, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| GeometryError::Estimation("SVD failed".into()))?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| GeometryError::Estimation("empty SVD".into()))?;
    let h = vt.row(idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| GeometryError::Estimation("singular normalization".into()))?;
    Homography::new(td_inv * hn * ts)
}

/// Exact homography through four correspondences, solving the 8x8 system
/// with `h22 = 1`.
pub fn four_point(pairs: &[(Point, Point); 4]) -> Result<Homography, GeometryError> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (s, d)) in pairs.iter().enumerate() {
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        for c in 0..8 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| GeometryError::Estimation("singular minimal system".into()))?;
    Homography::new(Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0))
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
    let (vx, vy) = (c[0] - a[0], c[1] - a[1]);
    let cross = (ux * vy - uy * vx).abs();
    let scale = (ux.hypot(uy) * vx.hypot(vy)).max(1e-300);
    cross <= 1e-9 * scale
}

/// True when any three of the four points are collinear.
pub fn degenerate_sample(p: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| collinear(p[t[0]], p[t[1]], p[t[2]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold_px: f64,
    pub seed: u64,
    /// Inlier refits after the hypothesis search.
    pub refit_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 2000,
            threshold_px: 3.0,
            seed: 0,
            refit_rounds: 5,
        }
    }
}

fn inliers(h: &Homography, pairs: &[(Point, Point)], thr2: f64) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter_map(|(i, (s, d))| {
            let p = h.warp(*s)?;
            ((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2) <= thr2).then_some(i)
        })
        .collect()
}

/// RANSAC over minimal four-point hypotheses followed by normalized-DLT
/// refits on the inlier set. Deterministic for a fixed seed.
pub fn estimate_homography(pairs: &[(Point, Point)], cfg: &RansacConfig) -> Result<Homography, GeometryError> {
    if pairs.len() < 4 {
        return Err(GeometryError::Estimation(format!(
            "need at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    if !(cfg.threshold_px > 0.0) || cfg.iterations == 0 {
        return Err(GeometryError::InvalidConfig(
            "RANSAC needs a positive threshold and at least one iteration".into(),
        ));
    }
    let thr2 = cfg.threshold_px * cfg.threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Homography, Vec<usize>)> = None;
    let iterations = if pairs.len() == 4 { 1 } else { cfg.iterations };
    for _ in 0..iterations {
        let idx = sample(&mut rng, pairs.len(), 4);
        let s: [(Point, Point); 4] = std::array::from_fn(|i| pairs[idx.index(i)]);
        if degenerate_sample(&s.map(|p| p.0)) || degenerate_sample(&s.map(|p| p.1)) {
            continue;
        }
        let Ok(h) = four_point(&s) else { continue };
        let inl = inliers(&h, pairs, thr2);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((h, inl));
        }
    }
    let (mut h, mut inl) =
        best.ok_or_else(|| GeometryError::Estimation("every sampled configuration was degenerate".into()))?;
    for _ in 0..cfg.refit_rounds {
        if inl.len() < 4 {
            break;
        }
        let subset: Vec<(Point, Point)> = inl.iter().map(|&i| pairs[i]).collect();
        let Ok(refit) = dlt(&subset) else { break };
        let next = inliers(&refit, pairs, thr2);
        if next.len() < inl.len() {
            break;
        }
        let done = next == inl;
        h = refit;
        inl = next;
        if done {
            break;
        }
    }
    // Outliers that land inside the threshold by chance bias the least-squares
    // fit. Drop points far above the typical inlier residual and refit.
    for _ in 0..cfg.refit_rounds {
        let mut res: Vec<(usize, f64)> = inl
            .iter()
            .filter_map(|&i| {
                let (s, d) = pairs[i];
                let p = h.warp(s)?;
                Some((i, (p[0] - d[0]).hypot(p[1] - d[1])))
            })
            .collect();
        if res.len() < 8 {
            break;
        }
        let mut sorted: Vec<f64> = res.iter().map(|r| r.1).collect();
        sorted.sort_by(f64::total_cmp);
        let tight = (4.0 * sorted[sorted.len() / 2]).max(1e-9);
        res.retain(|r| r.1 <= tight);
        if res.len() == inl.len() || res.len() < 8 {
            break;
        }
        let subset: Vec<(Point, Point)> = res.iter().map(|r| pairs[r.0]).collect();
        let Ok(refit) = dlt(&subset) else { break };
        h = refit;
        inl = res.into_iter().map(|r| r.0).collect();
    }
    Ok(h)
}
