//! Reference boxes: Faster-R-CNN anchor pyramids and SSD default boxes.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Anchor side lengths (pixels) and width:height aspect ratios.
///
/// Every anchor has area exactly `scale²`; a ratio `r` stretches the width by
/// `√r` and shrinks the height by the same factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![128.0, 256.0, 512.0],
            ratios: vec![2.0, 1.0, 0.5],
        }
    }
}

impl AnchorSpec {
    pub fn new(scales: Vec<f64>, ratios: Vec<f64>) -> Result<Self> {
        let spec = Self { scales, ratios };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.scales.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(format!(
                "anchor scales must be positive and strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!(
                "anchor ratios must be positive, got {:?}",
                self.ratios
            )));
        }
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Geometry of one feature map: `stride` input pixels per cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub name: String,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMapSpec {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

fn shaped_box(cx: f64, cy: f64, side: f64, ratio: f64) -> BBox {
    let root = ratio.sqrt();
    BBox::from_center(cx, cy, side * root, side / root)
}

/// One box per (cell, scale, ratio), in row-major cell order, then scale, then ratio.
pub fn generate_anchors(map: &FeatureMapSpec, spec: &AnchorSpec) -> Vec<BBox> {
    let mut out = Vec::with_capacity(map.cells() * spec.anchors_per_location());
    for row in 0..map.height {
        for col in 0..map.width {
            let (cx, cy) = map.cell_center(row, col);
            for &scale in &spec.scales {
                for &ratio in &spec.ratios {
                    out.push(shaped_box(cx, cy, scale, ratio));
                }
            }
        }
    }
    out
}

/// Linearly spaced SSD scales from `s_min` (lowest map) to `s_max` (highest).
pub fn default_box_scales(maps: usize, s_min: f64, s_max: f64) -> Result<Vec<f64>> {
    if maps < 2 {
        return Err(Error::InvalidArgument(format!(
            "default-box scales need at least 2 feature maps, got {maps}"
        )));
    }
    let step = (s_max - s_min) / (maps - 1) as f64;
    let mut scales: Vec<f64> = (0..maps).map(|k| s_min + step * k as f64).collect();
    // endpoints are pinned so the top map is exactly s_max
    scales[0] = s_min;
    scales[maps - 1] = s_max;
    Ok(scales)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultBoxSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub maps: Vec<FeatureMapSpec>,
    pub ratios_per_map: Vec<Vec<f64>>,
}

impl DefaultBoxSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min < self.s_max && self.s_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < s_min < s_max <= 1, got s_min={} s_max={}",
                self.s_min, self.s_max
            )));
        }
        if self.maps.len() < 2 {
            return Err(Error::Config("SSD needs at least 2 prediction maps".into()));
        }
        if self.ratios_per_map.len() != self.maps.len() {
            return Err(Error::Config(format!(
                "{} ratio lists for {} maps",
                self.ratios_per_map.len(),
                self.maps.len()
            )));
        }
        if self
            .ratios_per_map
            .iter()
            .any(|rs| rs.is_empty() || rs.iter().any(|&r| !(r > 0.0)))
        {
            return Err(Error::Config("every map needs positive aspect ratios".into()));
        }
        Ok(())
    }

    /// Boxes emitted per cell of map `k`: one per ratio plus the extra scale.
    pub fn boxes_per_cell(&self, k: usize) -> usize {
        self.ratios_per_map[k].len() + 1
    }

    pub fn total_boxes(&self) -> usize {
        self.maps
            .iter()
            .enumerate()
            .map(|(k, m)| m.cells() * self.boxes_per_cell(k))
            .sum()
    }
}

/// SSD default boxes in map order, row-major cells, then ratios, then the
/// extra `√(s_k·s_{k+1})` box at ratio 1. Boxes are not clipped to the image.
pub fn generate_default_boxes(spec: &DefaultBoxSpec, input_size: f64) -> Result<Vec<BBox>> {
    spec.validate()?;
    let m = spec.maps.len();
    let scales = default_box_scales(m, spec.s_min, spec.s_max)?;
    let mut out = Vec::with_capacity(spec.total_boxes());
    for (k, map) in spec.maps.iter().enumerate() {
        let s_k = scales[k];
        let s_next = if k + 1 < m { scales[k + 1] } else { spec.s_max };
        let extra = (s_k * s_next).sqrt();
        for row in 0..map.height {
            for col in 0..map.width {
                let (cx, cy) = map.cell_center(row, col);
                for &ratio in &spec.ratios_per_map[k] {
                    out.push(shaped_box(cx, cy, s_k * input_size, ratio));
                }
                out.push(shaped_box(cx, cy, extra * input_size, 1.0));
            }
        }
    }
    Ok(out)
}
