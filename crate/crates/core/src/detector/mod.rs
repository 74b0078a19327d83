//! Complete detectors: the two-stage Faster R-CNN family and SSD.

pub mod frcnn;
pub mod ssd;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::boxes::{greedy_nms_indices, BBox, Detection, GroundTruth};
use crate::nets::layers::{Module, Param};
use crate::nets::tensor::Volume;

pub use frcnn::{FasterRcnn, FrcnnConfig, FrcnnVariant};
pub use ssd::{Ssd, SsdConfig};

/// One training or evaluation image with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub gts: Vec<GroundTruth>,
}

/// Post-processing of class scores into final detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Candidates per class entering NMS.
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl InferenceConfig {
    pub fn frcnn_default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.3,
            pre_nms_top_k: 300,
            max_detections: 100,
        }
    }

    pub fn ssd_default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_threshold: 0.45,
            pre_nms_top_k: 400,
            max_detections: 100,
        }
    }
}

/// Scales RGB bytes to `[0,1]` and subtracts the per-channel mean.
pub fn preprocess(image: &RgbImage, pixel_mean: [f64; 3]) -> Volume {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f64 / 255.0 - pixel_mean[c];
        }
    }
    Volume::from_data(3, h, w, data)
}

/// Per-channel mean of `[0,1]`-scaled pixels over a set of images.
pub fn pixel_mean<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for p in img.pixels() {
            for c in 0..3 {
                sum[c] += p.0[c] as f64 / 255.0;
            }
        }
        n += (img.width() * img.height()) as usize;
    }
    if n == 0 {
        return [0.0; 3];
    }
    sum.map(|s| s / n as f64)
}

/// Per-class thresholding, top-k, NMS and a global cap. `candidates[c]`
/// holds `(box, score)` pairs for class `c+1`.
pub(crate) fn finalize_detections(candidates: Vec<Vec<(BBox, f64)>>, cfg: &InferenceConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for (c, mut cands) in candidates.into_iter().enumerate() {
        cands.retain(|(b, s)| *s >= cfg.score_threshold && b.is_valid());
        let scores: Vec<f64> = cands.iter().map(|(_, s)| *s).collect();
        let mut order = crate::boxes::score_order(&scores);
        order.truncate(cfg.pre_nms_top_k);
        let boxes: Vec<BBox> = order.iter().map(|&i| cands[i].0).collect();
        let scores: Vec<f64> = order.iter().map(|&i| cands[i].1).collect();
        for k in greedy_nms_indices(&boxes, &scores, None, cfg.nms_threshold) {
            out.push(Detection {
                bbox: boxes[k],
                class_id: c + 1,
                score: scores[k],
            });
        }
    }
    let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
    crate::boxes::score_order(&scores)
        .into_iter()
        .take(cfg.max_detections)
        .map(|i| out[i])
        .collect()
}

/// Loss components of one training step; unused entries stay 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub ssd_cls: f64,
    pub ssd_reg: f64,
    pub total: f64,
}

impl StepLoss {
    pub fn accumulate(&mut self, other: &StepLoss, weight: f64) {
        self.rpn_cls += weight * other.rpn_cls;
        self.rpn_reg += weight * other.rpn_reg;
        self.roi_cls += weight * other.roi_cls;
        self.roi_reg += weight * other.roi_reg;
        self.ssd_cls += weight * other.ssd_cls;
        self.ssd_reg += weight * other.ssd_reg;
        self.total += weight * other.total;
    }
}

/// Either detector family behind one interface.
#[derive(Debug, Clone)]
pub enum Model {
    Frcnn(FasterRcnn),
    Ssd(Ssd),
}

impl Model {
    pub fn num_classes(&self) -> usize {
        match self {
            Model::Frcnn(m) => m.num_classes,
            Model::Ssd(m) => m.num_classes,
        }
    }

    /// Detections in original image coordinates.
    pub fn detect(&mut self, image: &RgbImage, pixel_mean: [f64; 3]) -> crate::Result<Vec<Detection>> {
        match self {
            Model::Frcnn(m) => m.detect(&preprocess(image, pixel_mean)),
            Model::Ssd(m) => m.detect_image(image, pixel_mean),
        }
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&Param> {
        match self {
            Model::Frcnn(m) => m.params(),
            Model::Ssd(m) => m.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Model::Frcnn(m) => m.params_mut(),
            Model::Ssd(m) => m.params_mut(),
        }
    }
}
