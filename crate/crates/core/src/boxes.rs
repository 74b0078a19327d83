//! Axis-aligned box geometry shared by every detector stage.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner.
//! Nothing in this module rounds to integers, so `decode(encode(g, a), a)`
//! reproduces `g` up to floating-point error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clamp applied to the log-size deltas before exponentiation.
pub const DEFAULT_LOG_SIZE_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area, or zero for degenerate (inverted or flat) boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Finite with strictly positive width and height.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn is_inside(&self, image_w: f64, image_h: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= image_w && self.y_max <= image_h
    }

    pub fn clip(&self, image_w: f64, image_h: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, image_w),
            self.y_min.clamp(0.0, image_h),
            self.x_max.clamp(0.0, image_w),
            self.y_max.clamp(0.0, image_h),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Zero for disjoint boxes and for any pair whose
/// union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target of a box relative to a reference (anchor) box.
///
/// `tx`, `ty` are center offsets in units of the anchor width/height; `tw`, `th`
/// are natural-log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) || !gt.is_finite() {
        return Err(Error::InvalidGroundTruth(gt.to_array()));
    }
    if !anchor.is_valid() {
        return Err(Error::InvalidArgument(format!(
            "anchor {:?} has no area",
            anchor.to_array()
        )));
    }
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoxDelta {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

/// Inverse of [`encode`], clipped to the image. Boxes pushed entirely off the
/// image come back degenerate; callers drop them.
pub fn decode(delta: &BoxDelta, anchor: &BBox, image_w: f64, image_h: f64) -> BBox {
    decode_with_clamp(delta, anchor, image_w, image_h, DEFAULT_LOG_SIZE_CLAMP)
}

pub fn decode_with_clamp(
    delta: &BoxDelta,
    anchor: &BBox,
    image_w: f64,
    image_h: f64,
    log_size_clamp: f64,
) -> BBox {
    decode_unclipped(delta, anchor, log_size_clamp).clip(image_w, image_h)
}

pub fn decode_unclipped(delta: &BoxDelta, anchor: &BBox, log_size_clamp: f64) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let tw = delta.tw.clamp(-log_size_clamp, log_size_clamp);
    let th = delta.th.clamp(-log_size_clamp, log_size_clamp);
    BBox::from_center(
        ax + delta.tx * aw,
        ay + delta.ty * ah,
        aw * tw.exp(),
        ah * th.exp(),
    )
}

/// A ground-truth object: class ids run from 1; 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Visiting order for greedy suppression: descending score, ascending index on ties.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression over `(box, score, group)` triples; only members of the
/// same group suppress each other. Returns kept indices in visiting order.
pub(crate) fn greedy_nms_indices(
    boxes: &[BBox],
    scores: &[f64],
    groups: Option<&[usize]>,
    iou_threshold: f64,
) -> Vec<usize> {
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let same_group = groups.map_or(true, |g| g[i] == g[j]);
            if same_group && iou(&boxes[i], &boxes[j]) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Per-class greedy non-maximum suppression.
///
/// Output is sorted by descending score with ties broken by input position.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    debug_assert!(iou_threshold > 0.0 && iou_threshold < 1.0);
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    greedy_nms_indices(&boxes, &scores, Some(&classes), iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

pub fn flip_box(b: &BBox, image_w: f64, image_h: f64, axis: FlipAxis) -> BBox {
    match axis {
        FlipAxis::Horizontal => BBox::new(image_w - b.x_max, b.y_min, image_w - b.x_min, b.y_max),
        FlipAxis::Vertical => BBox::new(b.x_min, image_h - b.y_max, b.x_max, image_h - b.y_min),
    }
}
