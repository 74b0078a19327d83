use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallAxis {
    ProposalCount,
    IouThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub axis: RecallAxis,
    /// `(x, recall)` pairs in ascending `x`.
    pub points: Vec<(f64, f64)>,
}

impl RecallCurve {
    pub fn at(&self, x: f64) -> Option<f64> {
        self.points.iter().find(|p| p.0 == x).map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let head = match self.axis {
            RecallAxis::ProposalCount => "proposals",
            RecallAxis::IouThreshold => "iou",
        };
        let mut s = format!("{head},recall\n");
        for (x, r) in &self.points {
            s.push_str(&format!("{x},{r}\n"));
        }
        s
    }
}

/// Rank of the first proposal overlapping `gt` by at least the threshold.
/// A gt counts as recalled at `n` when this rank is below `n`.
fn first_hit_rank(proposals: &[BBox], gt: &BBox, iou_threshold: f64) -> Option<usize> {
    proposals.iter().position(|p| iou(p, gt) >= iou_threshold)
}

/// Recall against the number of top-ranked proposals kept per image, for
/// `n = 1..=max_n`.
pub fn proposal_recall(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], max_n: usize, iou_threshold: f64) -> RecallCurve {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut hits = vec![0usize; max_n + 1];
    for (img, g) in gts.iter().enumerate() {
        let props = proposals.get(img).map_or(&[][..], |p| &p[..p.len().min(max_n)]);
        for b in g {
            if let Some(r) = first_hit_rank(props, b, iou_threshold) {
                hits[r + 1] += 1;
            }
        }
    }
    let mut acc = 0usize;
    let points = (1..=max_n)
        .map(|n| {
            acc += hits[n];
            (n as f64, if total == 0 { 0.0 } else { acc as f64 / total as f64 })
        })
        .collect();
    RecallCurve {
        axis: RecallAxis::ProposalCount,
        points,
    }
}

/// Recall of the top `fixed_n` proposals per image at each IoU threshold.
pub fn recall_vs_iou(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], fixed_n: usize, thresholds: &[f64]) -> RecallCurve {
    let mut best = Vec::new();
    for (img, g) in gts.iter().enumerate() {
        let props = proposals.get(img).map_or(&[][..], |p| &p[..p.len().min(fixed_n)]);
        for b in g {
            best.push(props.iter().map(|p| iou(p, b)).fold(0.0, f64::max));
        }
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    let points = ts
        .iter()
        .map(|&t| {
            let r = if best.is_empty() {
                0.0
            } else {
                best.iter().filter(|&&o| o >= t).count() as f64 / best.len() as f64
            };
            (t, r)
        })
        .collect();
    RecallCurve {
        axis: RecallAxis::IouThreshold,
        points,
    }
}
