//! Single-shot detector: backbone taps plus auxiliary layers feed per-source
//! prediction convolutions over a fixed set of default boxes.

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{finalize_detections, preprocess, InferenceConfig, StepLoss};
use crate::boxes::{decode, BBox, BoxDelta, Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::nets::backbone::{Backbone, BackboneConfig};
use crate::nets::layers::{Module, Param};
use crate::nets::ssd::{SsdHeadConfig, SsdNet};
use crate::nets::tensor::{softmax, Matrix, Volume};
use crate::priors::{generate_default_boxes, DefaultBoxSpec};
use crate::sampling::{hard_negative_mine, match_ssd, AssignmentConfig, Label};
use crate::trainer::loss::multitask_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub backbone: BackboneConfig,
    pub head: SsdHeadConfig,
    /// Square network input side; images are resized to it.
    pub input_size: usize,
    pub s_min: f64,
    pub s_max: f64,
    /// Divisors applied to regression targets.
    pub bbox_stds: [f64; 4],
    pub inference: InferenceConfig,
}

impl SsdConfig {
    pub fn default_box_spec(&self) -> Result<DefaultBoxSpec> {
        self.backbone.validate()?;
        self.head
            .default_box_spec(&self.backbone, self.input_size, self.s_min, self.s_max)
    }
}

#[derive(Debug, Clone)]
pub struct Ssd {
    pub config: SsdConfig,
    pub num_classes: usize,
    backbone: Backbone,
    net: SsdNet,
    default_boxes: Vec<BBox>,
}

/// Resizes an image and its boxes to the square network input.
pub fn resize_sample(image: &RgbImage, gts: &[GroundTruth], size: usize) -> (RgbImage, Vec<GroundTruth>) {
    let (w, h) = (image.width(), image.height());
    if w as usize == size && h as usize == size {
        return (image.clone(), gts.to_vec());
    }
    let resized = image::imageops::resize(image, size as u32, size as u32, FilterType::Triangle);
    let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
    let gts = gts
        .iter()
        .map(|g| GroundTruth {
            bbox: g.bbox.scale(sx, sy),
            class_id: g.class_id,
        })
        .collect();
    (resized, gts)
}

impl Ssd {
    pub fn new<R: Rng>(config: &SsdConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        let spec = config.default_box_spec()?;
        let default_boxes = generate_default_boxes(&spec, config.input_size as f64)?;
        let backbone = Backbone::new(&config.backbone, rng)?;
        let net = SsdNet::new(&config.head, &config.backbone, num_classes, rng)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            backbone,
            net,
            default_boxes,
        })
    }

    pub fn default_boxes(&self) -> &[BBox] {
        &self.default_boxes
    }

    pub fn num_sources(&self) -> usize {
        self.config.head.sources.len()
    }

    fn check_input(&self, image: &Volume) -> Result<()> {
        let s = self.config.input_size;
        if image.height != s || image.width != s {
            return Err(Error::InvalidArgument(format!(
                "SSD expects a {s}x{s} input, got {}x{}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    /// Forward and backward on one preprocessed `input_size` square image
    /// whose boxes are already in input coordinates.
    pub fn train_step(
        &mut self,
        image: &Volume,
        gts: &[GroundTruth],
        assign: &AssignmentConfig,
        lambda: f64,
    ) -> Result<StepLoss> {
        self.check_input(image)?;
        let taps = self.backbone.forward(image);
        let out = self.net.forward(&taps, self.default_boxes.len())?;
        let targets = match_ssd(&self.default_boxes, gts, assign)?;
        let n = self.default_boxes.len();
        let bg_loss: Vec<f64> = (0..n)
            .map(|i| -softmax(out.logits.row(i))[0].max(f64::MIN_POSITIVE).ln())
            .collect();
        let negatives = hard_negative_mine(&bg_loss, &targets.labels, assign);
        let mut rows: Vec<usize> = (0..n).filter(|&i| targets.labels[i] == Label::Foreground).collect();
        rows.extend(negatives);
        rows.sort_unstable();

        let stds = self.config.bbox_stds;
        let logits = out.logits.select_rows(&rows);
        let mut cls = Vec::with_capacity(rows.len());
        let mut pred = Vec::with_capacity(rows.len());
        let mut tgt = Vec::with_capacity(rows.len());
        for &i in &rows {
            pred.push(out.deltas[i].to_array());
            match (targets.gt[i], targets.deltas[i]) {
                (Some(g), Some(d)) => {
                    cls.push(gts[g].class_id);
                    let d = d.to_array();
                    tgt.push(Some([d[0] / stds[0], d[1] / stds[1], d[2] / stds[2], d[3] / stds[3]]));
                }
                _ => {
                    cls.push(0);
                    tgt.push(None);
                }
            }
        }
        let loss = multitask_loss(&logits, &cls, &pred, &tgt, lambda);
        let mut d_logits = Matrix::zeros(n, out.logits.cols);
        let mut d_deltas = vec![[0.0; 4]; n];
        for (r, &i) in rows.iter().enumerate() {
            d_logits.row_mut(i).copy_from_slice(loss.d_logits.row(r));
            d_deltas[i] = loss.d_deltas[r];
        }
        let grads = self.net.backward(&d_logits, &d_deltas);
        self.backbone.backward(&grads);
        Ok(StepLoss {
            ssd_cls: loss.cls,
            ssd_reg: loss.reg,
            total: loss.total,
            ..StepLoss::default()
        })
    }

    /// Detections in input coordinates for a preprocessed square image.
    pub fn detect(&mut self, image: &Volume) -> Result<Vec<Detection>> {
        self.check_input(image)?;
        let size = self.config.input_size as f64;
        let taps = self.backbone.forward(image);
        let out = self.net.forward(&taps, self.default_boxes.len())?;
        let stds = self.config.bbox_stds;
        let mut candidates = vec![Vec::new(); self.num_classes];
        for (i, prior) in self.default_boxes.iter().enumerate() {
            let p = softmax(out.logits.row(i));
            let d = out.deltas[i];
            let mut decoded = None;
            for c in 1..=self.num_classes {
                if p[c] < self.config.inference.score_threshold {
                    continue;
                }
                let b = *decoded.get_or_insert_with(|| {
                    let delta = BoxDelta::new(d.tx * stds[0], d.ty * stds[1], d.tw * stds[2], d.th * stds[3]);
                    decode(&delta, prior, size, size)
                });
                candidates[c - 1].push((b, p[c]));
            }
        }
        Ok(finalize_detections(candidates, &self.config.inference))
    }

    /// Resizes, runs the network and maps boxes back to image coordinates.
    pub fn detect_image(&mut self, image: &RgbImage, pixel_mean: [f64; 3]) -> Result<Vec<Detection>> {
        let (resized, _) = resize_sample(image, &[], self.config.input_size);
        let size = self.config.input_size as f64;
        let (sx, sy) = (image.width() as f64 / size, image.height() as f64 / size);
        let mut dets = self.detect(&preprocess(&resized, pixel_mean))?;
        for d in &mut dets {
            d.bbox = d.bbox.scale(sx, sy);
        }
        Ok(dets)
    }
}

impl Module for Ssd {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.net.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.net.params_mut());
        v
    }
}
