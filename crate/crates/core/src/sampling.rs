//! Training-target assignment and example selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{encode, greedy_nms_indices, iou, score_order, BBox, BoxDelta, GroundTruth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub roi_fg_iou: f64,
    /// Background ROIs have max IoU in `[lo, hi)`; below `lo` they are ignored.
    pub roi_bg_range: [f64; 2],
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub ssd_match_iou: f64,
    pub ssd_neg_pos_ratio: f64,
    /// Negatives kept by hard mining when an image has no positives.
    pub ssd_min_negatives: usize,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_fg_fraction: 0.5,
            roi_fg_iou: 0.5,
            roi_bg_range: [0.1, 0.5],
            roi_batch: 128,
            roi_fg_fraction: 0.25,
            ssd_match_iou: 0.5,
            ssd_neg_pos_ratio: 3.0,
            ssd_min_negatives: 8,
        }
    }
}

fn unit_open(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let thresholds = [
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("rpn_neg_iou", self.rpn_neg_iou),
            ("roi_fg_iou", self.roi_fg_iou),
            ("ssd_match_iou", self.ssd_match_iou),
        ];
        for (name, v) in thresholds {
            if !unit_open(v) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if self.rpn_neg_iou >= self.rpn_pos_iou {
            return Err(Error::Config("rpn_neg_iou must be below rpn_pos_iou".into()));
        }
        let [lo, hi] = self.roi_bg_range;
        if !(0.0 <= lo && lo < hi && hi <= self.roi_fg_iou) {
            return Err(Error::Config(format!(
                "roi_bg_range must satisfy 0 <= lo < hi <= roi_fg_iou, got [{lo}, {hi})"
            )));
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, v) in [("rpn_fg_fraction", self.rpn_fg_fraction), ("roi_fg_fraction", self.roi_fg_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(self.ssd_neg_pos_ratio >= 0.0) {
            return Err(Error::Config("ssd_neg_pos_ratio must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    /// Hard ROIs kept per image.
    pub batch_size: usize,
    pub dedup_iou: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            dedup_iou: 0.7,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("OHEM batch_size must be at least 1".into()));
        }
        if !unit_open(self.dedup_iou) {
            return Err(Error::Config(format!("OHEM dedup_iou must lie in (0,1), got {}", self.dedup_iou)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Foreground,
    Background,
    Ignore,
}

/// Per-example targets. `gt[i]` is the best-overlapping ground truth for
/// foreground examples; `deltas[i]` its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub labels: Vec<Label>,
    pub gt: Vec<Option<usize>>,
    pub deltas: Vec<Option<BoxDelta>>,
}

impl Targets {
    fn ignore_all(n: usize) -> Self {
        Self {
            labels: vec![Label::Ignore; n],
            gt: vec![None; n],
            deltas: vec![None; n],
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Highest IoU and its ground-truth index (lowest index on ties).
fn best_gt(b: &BBox, gts: &[GroundTruth]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let v = iou(b, &gt.bbox);
        if best.map_or(true, |(_, m)| v > m) {
            best = Some((g, v));
        }
    }
    best
}

/// Labels anchors for RPN training.
///
/// Anchors crossing the image boundary are ignored. An anchor is foreground
/// when its IoU with some gt reaches `rpn_pos_iou`, or when it attains that
/// gt's maximum IoU over all inside anchors (provided the maximum is positive).
/// Background means max IoU below `rpn_neg_iou`.
pub fn assign_rpn_targets(
    anchors: &[BBox],
    gts: &[GroundTruth],
    image_w: f64,
    image_h: f64,
    cfg: &AssignmentConfig,
) -> Result<Targets> {
    let mut t = Targets::ignore_all(anchors.len());
    let inside: Vec<usize> = (0..anchors.len())
        .filter(|&i| anchors[i].is_inside(image_w, image_h))
        .collect();
    let overlaps: Vec<Vec<f64>> = inside
        .iter()
        .map(|&i| gts.iter().map(|g| iou(&anchors[i], &g.bbox)).collect())
        .collect();
    let mut gt_max = vec![0.0f64; gts.len()];
    for row in &overlaps {
        for (g, &v) in row.iter().enumerate() {
            gt_max[g] = gt_max[g].max(v);
        }
    }
    for (row, &i) in overlaps.iter().zip(&inside) {
        let (best, max) = row
            .iter()
            .enumerate()
            .fold((None, 0.0f64), |(b, m), (g, &v)| if b.is_none() || v > m { (Some(g), v) } else { (b, m) });
        let is_argmax = row.iter().zip(&gt_max).any(|(&v, &m)| m > 0.0 && v == m);
        if best.is_some() && (max >= cfg.rpn_pos_iou || is_argmax) {
            let g = best.expect("checked");
            t.labels[i] = Label::Foreground;
            t.gt[i] = Some(g);
            t.deltas[i] = Some(encode(&gts[g].bbox, &anchors[i])?);
        } else if max < cfg.rpn_neg_iou {
            t.labels[i] = Label::Background;
        }
    }
    Ok(t)
}

/// Labels proposals for the ROI head: foreground at `roi_fg_iou` and above,
/// background inside `roi_bg_range`, ignored otherwise.
pub fn assign_roi_targets(rois: &[BBox], gts: &[GroundTruth], cfg: &AssignmentConfig) -> Result<Targets> {
    let mut t = Targets::ignore_all(rois.len());
    let [lo, hi] = cfg.roi_bg_range;
    for (i, roi) in rois.iter().enumerate() {
        let (g, max) = match best_gt(roi, gts) {
            Some(b) => b,
            None => {
                if lo <= 0.0 {
                    t.labels[i] = Label::Background;
                }
                continue;
            }
        };
        if max >= cfg.roi_fg_iou {
            t.labels[i] = Label::Foreground;
            t.gt[i] = Some(g);
            t.deltas[i] = Some(encode(&gts[g].bbox, roi)?);
        } else if max >= lo && max < hi {
            t.labels[i] = Label::Background;
        }
    }
    Ok(t)
}

/// Draws up to `round(fg_fraction·batch)` foreground and fills the rest with
/// background, each uniformly without replacement. A shortage on either side
/// is made up from the other. Returned indices are ascending.
pub fn sample_minibatch<R: Rng>(labels: &[Label], batch: usize, fg_fraction: f64, rng: &mut R) -> Vec<usize> {
    let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Foreground).collect();
    let bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Background).collect();
    let want_fg = (fg_fraction * batch as f64).round() as usize;
    let mut n_fg = fg.len().min(want_fg);
    let n_bg = bg.len().min(batch - n_fg);
    n_fg = fg.len().min(batch - n_bg);
    let mut out: Vec<usize> = fg.choose_multiple(rng, n_fg).copied().collect();
    out.extend(bg.choose_multiple(rng, n_bg).copied());
    out.sort_unstable();
    out
}

/// Loss-ranked greedy selection with spatial de-duplication: visit ROIs by
/// descending loss (ascending index on ties), skip any ROI overlapping an
/// already kept one at `dedup_iou` or more, stop after `batch_size`.
pub fn ohem_select(roi_losses: &[f64], roi_boxes: &[BBox], cfg: &OhemConfig) -> Vec<usize> {
    assert_eq!(roi_losses.len(), roi_boxes.len());
    let mut keep = greedy_nms_indices(roi_boxes, roi_losses, None, cfg.dedup_iou);
    keep.truncate(cfg.batch_size);
    keep
}

/// SSD matching.
///
/// Each gt, in index order, first claims its highest-IoU default box among
/// those not already claimed. Every other box whose best IoU reaches
/// `ssd_match_iou` is matched to its best gt. The rest are background.
pub fn match_ssd(default_boxes: &[BBox], gts: &[GroundTruth], cfg: &AssignmentConfig) -> Result<Targets> {
    let n = default_boxes.len();
    let mut t = Targets {
        labels: vec![Label::Background; n],
        gt: vec![None; n],
        deltas: vec![None; n],
    };
    let mut claimed = vec![false; n];
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in default_boxes.iter().enumerate() {
            if claimed[i] {
                continue;
            }
            let v = iou(b, &gt.bbox);
            if best.map_or(true, |(_, m)| v > m) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            claimed[i] = true;
            t.labels[i] = Label::Foreground;
            t.gt[i] = Some(g);
        }
    }
    for (i, b) in default_boxes.iter().enumerate() {
        if claimed[i] {
            continue;
        }
        if let Some((g, max)) = best_gt(b, gts) {
            if max >= cfg.ssd_match_iou {
                t.labels[i] = Label::Foreground;
                t.gt[i] = Some(g);
            }
        }
    }
    for i in 0..n {
        if let Some(g) = t.gt[i] {
            t.deltas[i] = Some(encode(&gts[g].bbox, &default_boxes[i])?);
        }
    }
    Ok(t)
}

/// Keeps the `round(ratio·#positives)` background boxes with the highest
/// classification loss (ascending index on ties), or `ssd_min_negatives`
/// when there are no positives. Returned indices are ascending.
pub fn hard_negative_mine(class_losses: &[f64], labels: &[Label], cfg: &AssignmentConfig) -> Vec<usize> {
    assert_eq!(class_losses.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == Label::Foreground).count();
    let quota = if n_pos == 0 {
        cfg.ssd_min_negatives
    } else {
        (cfg.ssd_neg_pos_ratio * n_pos as f64).round() as usize
    };
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Background).collect();
    let losses: Vec<f64> = negatives.iter().map(|&i| class_losses[i]).collect();
    let mut keep: Vec<usize> = score_order(&losses)
        .into_iter()
        .take(quota)
        .map(|k| negatives[k])
        .collect();
    keep.sort_unstable();
    keep
}
