//! Cell-based keypoint decoding, non-maximum suppression and descriptor
//! extraction on top of the raw head maps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::binnorm::{project, top_k_threshold, BinaryDescriptor, DEFAULT_TOL};
use crate::error::GraphError;
use crate::homeval::{FeatureDetector, Features};
use crate::imageio::Image;
use crate::matcher::DescriptorSet;
use crate::netgraph::network::{HeadMaps, Network};

pub const DEFAULT_NMS_RADIUS: f32 = 4.0;
pub const DEFAULT_SCORE_FLOOR: f32 = 0.0;
pub const DEFAULT_MAX_KEYPOINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_keypoints: usize,
    /// Pixels; a candidate within this distance of a kept keypoint is dropped.
    pub nms_radius: f32,
    /// Cells must score strictly above this value.
    pub score_floor: f32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_keypoints: DEFAULT_MAX_KEYPOINTS,
            nms_radius: DEFAULT_NMS_RADIUS,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
    /// Row-major index of the source cell on the head grid.
    #[serde(skip)]
    pub cell: usize,
}

/// Decodes keypoints for an image of `width x height` pixels.
///
/// Cell `(cx, cy)` proposes `((cx + 0.5 + dx) * cell, (cy + 0.5 + dy) * cell)`
/// clamped into the image. Cells lying entirely in padding are skipped.
/// Candidates are visited by score descending, then cell index ascending.
pub fn decode(heads: &HeadMaps, width: usize, height: usize, cell: usize, cfg: &DecodeConfig) -> Vec<Keypoint> {
    let s = heads.score.shape();
    let (gh, gw) = (s.h(), s.w());
    let scores = heads.score.data();
    let loc = heads.location.data();
    let max_x = width.saturating_sub(1) as f32;
    let max_y = height.saturating_sub(1) as f32;
    let cs = cell as f32;
    let mut cands: Vec<Keypoint> = Vec::new();
    for cy in 0..gh {
        if cy * cell >= height {
            break;
        }
        for cx in 0..gw {
            if cx * cell >= width {
                break;
            }
            let i = cy * gw + cx;
            let score = scores[i];
            if !(score > cfg.score_floor) {
                continue;
            }
            let (dx, dy) = (loc[2 * i], loc[2 * i + 1]);
            cands.push(Keypoint {
                x: ((cx as f32 + 0.5 + dx) * cs).clamp(0.0, max_x),
                y: ((cy as f32 + 0.5 + dy) * cs).clamp(0.0, max_y),
                score,
                cell: i,
            });
        }
    }
    cands.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.cell.cmp(&b.cell)));
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut kept: Vec<Keypoint> = Vec::new();
    for c in cands {
        if kept.len() >= cfg.max_keypoints {
            break;
        }
        let close = kept.iter().any(|k| {
            let (dx, dy) = (k.x - c.x, k.y - c.y);
            dx * dx + dy * dy <= r2
        });
        if !close {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DescriptorKind {
    /// Bin.Norm projection values in `[0, 1]` summing to `k`.
    Soft,
    /// Top-`k` bit codes with exactly `k` ones.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorPayload {
    /// Row-major `N x M` values.
    Soft(Vec<f32>),
    Binary(DescriptorSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub width: usize,
    pub height: usize,
    pub descriptor_dim: usize,
    pub k: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DescriptorPayload,
}

impl Detection {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn kind(&self) -> DescriptorKind {
        match self.descriptors {
            DescriptorPayload::Soft(_) => DescriptorKind::Soft,
            DescriptorPayload::Binary(_) => DescriptorKind::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub decode: DecodeConfig,
    pub kind: DescriptorKind,
    /// Number of ones per descriptor; `None` means `M / 2`.
    pub k: Option<usize>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            decode: DecodeConfig::default(),
            kind: DescriptorKind::Binary,
            k: None,
        }
    }
}

impl ExtractConfig {
    pub fn resolve_k(&self, m: usize) -> Result<usize, GraphError> {
        let k = self.k.unwrap_or(m / 2);
        if k == 0 || k >= m {
            return Err(GraphError::Config(format!(
                "k must satisfy 0 < k < M, got k = {k} with M = {m}"
            )));
        }
        Ok(k)
    }
}

/// Smallest accepted image side: two cells.
pub fn min_image_side(cell: usize) -> usize {
    2 * cell
}

/// Pads `img` with black on the right and bottom up to a multiple of `cell`.
pub fn pad_to_cell(img: &Image, cell: usize) -> Result<Image, GraphError> {
    let min = min_image_side(cell);
    if img.width() < min || img.height() < min {
        return Err(GraphError::InvalidInput(format!(
            "image is {}x{}, both sides must be at least {min} pixels",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width().next_multiple_of(cell), img.height().next_multiple_of(cell));
    if (w, h) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    Ok(img.resized_canvas(w, h))
}

/// Descriptors for the decoded keypoints, read at their source cells.
pub fn describe(heads: &HeadMaps, keypoints: &[Keypoint], kind: DescriptorKind, k: usize) -> Result<DescriptorPayload, GraphError> {
    let m = heads.descriptor.shape().c();
    let logits = heads.descriptor.data();
    let row = |kp: &Keypoint| &logits[kp.cell * m..(kp.cell + 1) * m];
    let bad = |e: String| GraphError::InvalidInput(e);
    match kind {
        DescriptorKind::Soft => {
            let mut out = Vec::with_capacity(keypoints.len() * m);
            for kp in keypoints {
                let x: Vec<f64> = row(kp).iter().map(|&v| v as f64).collect();
                let d = project(&x, k, DEFAULT_TOL)?;
                out.extend(d.y.iter().map(|&v| v as f32));
            }
            Ok(DescriptorPayload::Soft(out))
        }
        DescriptorKind::Binary => {
            let descs: Vec<BinaryDescriptor> =
                keypoints.iter().map(|kp| top_k_threshold(row(kp), k)).collect::<Result<_, _>>()?;
            let set = if descs.is_empty() {
                DescriptorSet::empty(m)
            } else {
                DescriptorSet::from_descriptors(&descs)
            };
            Ok(DescriptorPayload::Binary(set.map_err(|e| bad(e.to_string()))?))
        }
    }
}

/// Full pipeline: pad, forward, decode, describe.
pub fn extract(net: &Network, img: &Image, cfg: &ExtractConfig) -> Result<Detection, GraphError> {
    let spec = net.spec();
    let k = cfg.resolve_k(spec.descriptor_dim)?;
    let padded = pad_to_cell(img, spec.cell)?;
    let heads = net.forward(&padded)?;
    let keypoints = decode(&heads, img.width(), img.height(), spec.cell, &cfg.decode);
    let descriptors = describe(&heads, &keypoints, cfg.kind, k)?;
    Ok(Detection {
        width: img.width(),
        height: img.height(),
        descriptor_dim: spec.descriptor_dim,
        k,
        keypoints,
        descriptors,
    })
}

/// Adapts a [`Network`] to the evaluation harness with binary descriptors.
#[derive(Debug, Clone)]
pub struct NetworkDetector {
    pub network: Network,
    pub config: ExtractConfig,
}

impl NetworkDetector {
    pub fn new(network: Network, config: ExtractConfig) -> Self {
        NetworkDetector {
            network,
            config: ExtractConfig {
                kind: DescriptorKind::Binary,
                ..config
            },
        }
    }
}

impl FeatureDetector for NetworkDetector {
    fn detect(&self, image: &Image) -> Result<Features, String> {
        let det = extract(&self.network, image, &self.config).map_err(|e| e.to_string())?;
        let DescriptorPayload::Binary(descriptors) = det.descriptors else {
            return Err("detector requires binary descriptors".into());
        };
        Ok(Features {
            keypoints: det.keypoints.iter().map(|k| [k.x as f64, k.y as f64]).collect(),
            descriptors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{FpTensor, Shape};

    fn maps(gh: usize, gw: usize, scores: Vec<f32>, loc: Vec<f32>) -> HeadMaps {
        HeadMaps {
            score: FpTensor::new(Shape::new(1, gh, gw, 1), scores).unwrap(),
            location: FpTensor::new(Shape::new(1, gh, gw, 2), loc).unwrap(),
            descriptor: FpTensor::zeros(Shape::new(1, gh, gw, 4)),
        }
    }

    #[test]
    fn single_cell_decodes_to_center_plus_offset() {
        let mut s = vec![0.0; 12];
        s[5] = 0.9;
        let mut l = vec![0.0; 24];
        l[10] = 0.25;
        l[11] = -0.5;
        let kps = decode(&maps(3, 4, s, l), 32, 24, 8, &DecodeConfig::default());
        assert_eq!(kps.len(), 1);
        assert_eq!((kps[0].x, kps[0].y), ((1.0 + 0.5 + 0.25) * 8.0, (1.0 + 0.5 - 0.5) * 8.0));
    }

    #[test]
    fn nms_keeps_higher_score() {
        let s = vec![0.5, 0.8];
        let l = vec![0.4, 0.0, -0.4, 0.0];
        let kps = decode(&maps(1, 2, s, l), 16, 8, 8, &DecodeConfig::default());
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].score, 0.8);
    }

    #[test]
    fn padded_cells_skipped_and_clamped() {
        let s = vec![0.9, 0.9, 0.9];
        let l = vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let kps = decode(&maps(1, 3, s, l), 17, 5, 8, &DecodeConfig::default());
        assert_eq!(kps.len(), 2);
        assert!(kps.iter().all(|k| k.x <= 16.0 && k.y <= 4.0));
    }

    #[test]
    fn small_images_rejected() {
        assert!(pad_to_cell(&Image::filled(15, 40, [0; 3]), 8).is_err());
        let p = pad_to_cell(&Image::filled(17, 16, [1; 3]), 8).unwrap();
        assert_eq!((p.width(), p.height()), (24, 16));
    }
}
