//! Detection metrics at a single IoU threshold, proposal recall, reports,
//! overlays and plots.

mod overlay;
mod plot;
mod recall;
mod report;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, Detection, GroundTruth};

pub use overlay::{render_overlays, Palette, DEFAULT_OVERLAY_THRESHOLD};
pub use plot::{plot_lines, Series};
pub use recall::{proposal_recall, recall_vs_iou, RecallAxis, RecallCurve};
pub use report::{evaluate, timed_inference, ClassAp, ClassCurve, EvalReport, PUBLISHED_BEST_ROW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope over every recall step.
    #[default]
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Ranked true/false-positive flags of one class and its gt count.
fn match_class(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, iou_threshold: f64) -> (Vec<(f64, bool)>, usize) {
    let mut ranked: Vec<(usize, &Detection)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        ranked.extend(ds.iter().filter(|d| d.class_id == class_id).map(|d| (img, d)));
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let class_gts: Vec<Vec<&GroundTruth>> = gts
        .iter()
        .map(|g| g.iter().filter(|g| g.class_id == class_id).collect())
        .collect();
    let n_gt = class_gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = class_gts.iter().map(|g| vec![false; g.len()]).collect();
    let flags = ranked
        .iter()
        .map(|(img, d)| {
            let Some(cands) = class_gts.get(*img) else {
                return (d.score, false);
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in cands.iter().enumerate() {
                if used[*img][j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[*img][j] = true;
            }
            (d.score, best.is_some())
        })
        .collect();
    (flags, n_gt)
}

/// Precision/recall after each ranked detection of `class_id`; empty when the
/// class has no ground truth.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, iou_threshold: f64) -> Vec<PrPoint> {
    let (flags, n_gt) = match_class(dets, gts, class_id, iou_threshold);
    if n_gt == 0 {
        return Vec::new();
    }
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &(score, hit))| {
            tp += hit as usize;
            PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (k + 1) as f64,
                score,
            }
        })
        .collect()
}

/// Area under the precision envelope of a PR sequence.
pub fn ap_from_curve(points: &[PrPoint], method: ApMethod) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    for p in points {
        rec.push(p.recall);
        prec.push(p.precision);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    match method {
        ApMethod::AllPoints => (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum(),
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points
                        .iter()
                        .filter(|p| p.recall >= t)
                        .map(|p| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Average precision of one class; `None` when the class has no ground truth.
pub fn voc_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, iou_threshold: f64) -> Option<f64> {
    voc_ap_with(dets, gts, class_id, iou_threshold, ApMethod::AllPoints)
}

pub fn voc_ap_with(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    iou_threshold: f64,
    method: ApMethod,
) -> Option<f64> {
    let has_gt = gts.iter().flatten().any(|g| g.class_id == class_id);
    has_gt.then(|| ap_from_curve(&pr_curve(dets, gts, class_id, iou_threshold), method))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    /// Indexed by class id minus one; `None` marks classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined entries; `None` when no class is defined.
    pub map: Option<f64>,
}

/// Per-class AP for ids `1..=num_classes` and their mean, skipping classes
/// absent from the ground truth.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, iou_threshold: f64, method: ApMethod) -> MeanAp {
    let per_class: Vec<Option<f64>> = (1..=num_classes)
        .map(|c| voc_ap_with(dets, gts, c, iou_threshold, method))
        .collect();
    for (c, ap) in per_class.iter().enumerate() {
        if ap.is_none() {
            log::warn!("class {} has no ground truth; excluded from mAP", c + 1);
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MeanAp { per_class, map }
}
