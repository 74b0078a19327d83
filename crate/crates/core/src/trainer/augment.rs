//! Random mirroring of an image together with its boxes.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{flip_box, FlipAxis, GroundTruth};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
}

/// Mirrors pixels and boxes along one axis: pixel `(x, y)` moves to
/// `(W−1−x, y)` horizontally.
pub fn flip_sample(image: &RgbImage, boxes: &[GroundTruth], axis: FlipAxis) -> (RgbImage, Vec<GroundTruth>) {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let flipped = match axis {
        FlipAxis::Horizontal => image::imageops::flip_horizontal(image),
        FlipAxis::Vertical => image::imageops::flip_vertical(image),
    };
    let boxes = boxes
        .iter()
        .map(|g| GroundTruth {
            bbox: flip_box(&g.bbox, w, h, axis),
            class_id: g.class_id,
        })
        .collect();
    (flipped, boxes)
}

/// Each enabled axis flips with probability 0.5; horizontal is drawn first.
pub fn augment<R: Rng>(
    image: &RgbImage,
    boxes: &[GroundTruth],
    flags: AugmentFlags,
    rng: &mut R,
) -> (RgbImage, Vec<GroundTruth>) {
    let mut out = (image.clone(), boxes.to_vec());
    if flags.hflip && rng.gen_bool(0.5) {
        out = flip_sample(&out.0, &out.1, FlipAxis::Horizontal);
    }
    if flags.vflip && rng.gen_bool(0.5) {
        out = flip_sample(&out.0, &out.1, FlipAxis::Vertical);
    }
    out
}
