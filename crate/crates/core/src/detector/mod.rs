//! Detector contract and the built-in toy detector.
//!
//! A detector exposes one combined forward pass that yields raw candidates,
//! the neck activations and an opaque pass record. The record is what
//! [`DetectorContract::input_gradient`] differentiates through, so losses on
//! candidates and features always refer to the same evaluation.

mod checkpoint;
pub mod nn;
mod toy;
mod train;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, Image};
use crate::error::{Error, Result};

pub use checkpoint::{architecture_hash, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use toy::{ToyDetector, ToyPass, TOY_LEVELS};
pub use train::{clean_detection_rate, train_toy_detector, train_toy_detector_with, TrainConfig, TrainMetrics};

/// Candidates whose score falls below this are not reported.
pub const DEFAULT_CANDIDATE_FLOOR: f64 = 1e-3;
/// Score at or above which a target object counts as detected.
pub const DETECTION_THRESHOLD: f64 = 0.5;
/// IoU above which the lower-scoring of two same-class boxes is suppressed.
pub const NMS_IOU: f64 = 0.5;

/// Head cell a candidate was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRef {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    /// Objectness.
    pub conf_coor: f64,
    /// Probability of `class_id`.
    pub conf_cls: f64,
    pub cell: CellRef,
}

impl Detection {
    pub fn score(&self) -> f64 {
        self.conf_coor * self.conf_cls
    }
}

/// Neck activations, one `C x H x W` array per level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub levels: Vec<Array3<f64>>,
    pub level_names: Vec<String>,
}

impl FeatureMap {
    pub fn new(levels: Vec<Array3<f64>>, level_names: Vec<String>) -> Result<Self> {
        if levels.is_empty() || levels.len() != level_names.len() {
            return Err(Error::argument(format!(
                "feature map needs one name per level, got {} levels and {} names",
                levels.len(),
                level_names.len()
            )));
        }
        Ok(Self { levels, level_names })
    }

    pub fn level_index(&self, name: &str) -> Option<usize> {
        self.level_names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| Array3::zeros(l.dim())).collect(),
            level_names: self.level_names.clone(),
        }
    }
}

/// Upstream gradient on the two confidences of one candidate cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceSeed {
    pub cell: CellRef,
    /// Class whose probability `d_conf_cls` refers to.
    pub class_id: usize,
    pub d_conf_coor: f64,
    pub d_conf_cls: f64,
}

/// Result of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardOutput<P> {
    pub detections: Vec<Detection>,
    pub features: FeatureMap,
    pub pass: P,
}

pub trait DetectorContract: Send + Sync {
    type Pass: Send;

    fn class_count(&self) -> usize;

    /// `(height, width)` accepted by [`forward`](Self::forward).
    fn input_size(&self) -> (usize, usize);

    fn level_names(&self) -> Vec<String>;

    fn differentiable(&self) -> bool;

    fn forward(&self, image: &Image) -> Result<ForwardOutput<Self::Pass>>;

    /// Gradient w.r.t. the input image (`H x W x 3`) of
    /// `sum(seed · confidences) + sum(feature_grads · features)`.
    fn input_gradient(&self, pass: &Self::Pass, seeds: &[ConfidenceSeed], feature_grads: Option<&FeatureMap>) -> Result<Image>;

    fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        Ok(self.forward(image)?.detections)
    }

    fn features(&self, image: &Image) -> Result<FeatureMap> {
        Ok(self.forward(image)?.features)
    }
}

/// Class-aware non-maximum suppression on the confidence product.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<Detection> = Vec::new();
    for det in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && k.bbox.iou(&det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det.clone());
        }
    }
    kept
}

/// Highest post-NMS score among `class_id` detections, 0 when there is none.
pub fn max_class_score(detections: &[Detection], class_id: usize) -> f64 {
    nms(detections, NMS_IOU)
        .iter()
        .filter(|d| d.class_id == class_id)
        .map(Detection::score)
        .fold(0.0, f64::max)
}

pub(crate) fn check_image(image: &Image, input_size: (usize, usize)) -> Result<()> {
    let (h, w, c) = image.dim();
    if (h, w) != input_size || c != 3 {
        return Err(Error::argument(format!(
            "detector expects {}x{}x3 input, got {h}x{w}x{c}",
            input_size.0, input_size.1
        )));
    }
    Ok(())
}
