use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::Detection;
use crate::error::{Error, Result};

pub const DEFAULT_OVERLAY_THRESHOLD: f64 = 0.7;

/// Outline colors indexed by class id minus one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub thickness: u32,
}

impl Default for Palette {
    /// eryth red, leuko black, epith green, cryst magenta, cast cyan,
    /// mycete yellow, epithn blue.
    fn default() -> Self {
        Self {
            colors: vec![
                [255, 0, 0],
                [0, 0, 0],
                [0, 255, 0],
                [255, 0, 255],
                [0, 255, 255],
                [255, 255, 0],
                [0, 0, 255],
            ],
            thickness: 2,
        }
    }
}

impl Palette {
    pub fn color(&self, class_id: usize) -> Result<[u8; 3]> {
        class_id
            .checked_sub(1)
            .and_then(|i| self.colors.get(i))
            .copied()
            .ok_or_else(|| Error::UnknownClass(format!("class id {class_id}")))
    }
}

fn outline(img: &mut RgbImage, rect: [i64; 4], color: Rgb<u8>, thickness: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let [x0, y0, x1, y1] = rect;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..thickness {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }
}

/// Draws class-colored outlines for detections scoring above `score_threshold`.
pub fn render_overlays(image: &RgbImage, dets: &[Detection], score_threshold: f64, palette: &Palette) -> Result<RgbImage> {
    let mut out = image.clone();
    for d in dets {
        let color = palette.color(d.class_id)?;
        if d.score <= score_threshold {
            continue;
        }
        let b = d.bbox;
        let rect = [
            b.x_min.floor() as i64,
            b.y_min.floor() as i64,
            b.x_max.ceil() as i64 - 1,
            b.y_max.ceil() as i64 - 1,
        ];
        outline(&mut out, rect, Rgb(color), palette.thickness.max(1) as i64);
    }
    Ok(out)
}
