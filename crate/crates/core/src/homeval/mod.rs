//! Homography generation, robust estimation and pair-wise evaluation metrics.

pub mod augment;
pub mod homography;
pub mod hpatches;
pub mod metrics;

pub use augment::{
    apply_photometric, make_pair, sample_homography, synthetic_image, warp_image, AugmentationConfig,
    PhotometricConfig, Range, SpatialConfig,
};
pub use homography::{
    corner_error, corners, dlt, estimate_homography, homography_accuracy, warp_points, CornerAccuracy, Homography,
    Point, RansacConfig,
};
pub use metrics::{
    evaluate_pair, localization_error, matching_score, repeatability, run_sequence_eval, Dims, EvalConfig,
    FeatureDetector, Features, MatchingScoreResult, MetricReport, PairMetrics, RepeatabilityResult, SequenceReport,
};
