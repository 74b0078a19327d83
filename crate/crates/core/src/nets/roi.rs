//! ROI max pooling and the per-region classification/regression head.
//!
//! A ROI in pixels is projected onto the feature map by dividing by the tap
//! stride; cell `j` covers projected coordinates `[j, j+1)`. The projected ROI
//! is split into `pool_h × pool_w` equal bins and bin `i` reads the cells from
//! `floor(start_i)` up to (excluding) `ceil(end_i)`, clipped to the map. Bins
//! that fall entirely off the map output zero.

use rand::Rng;

use super::layers::{Init, Linear, Module, Param, Relu};
use super::tensor::{softmax, Matrix, Volume};
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Fixed-size pooled activations of one ROI, laid out `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub channels: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub data: Vec<f64>,
}

impl RoiFeature {
    pub fn zeros(channels: usize, pool_h: usize, pool_w: usize) -> Self {
        Self {
            channels,
            pool_h,
            pool_w,
            data: vec![0.0; channels * pool_h * pool_w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.pool_h + y) * self.pool_w + x]
    }
}

/// Pooling result plus, per output element, the feature index it came from.
#[derive(Debug, Clone)]
pub struct PooledRoi {
    pub feature: RoiFeature,
    pub argmax: Vec<Option<usize>>,
}

fn bin_range(start: f64, len: f64, bins: usize, i: usize, limit: usize) -> (usize, usize) {
    let lo = start + len * i as f64 / bins as f64;
    let hi = if i + 1 == bins {
        start + len
    } else {
        start + len * (i + 1) as f64 / bins as f64
    };
    let lo = lo.floor().clamp(0.0, limit as f64) as usize;
    let hi = hi.ceil().clamp(0.0, limit as f64) as usize;
    (lo, hi)
}

pub fn roi_pool(features: &Volume, stride: f64, roi: &BBox, pool_h: usize, pool_w: usize) -> Result<PooledRoi> {
    let proj = roi.scale(1.0 / stride, 1.0 / stride);
    if !proj.is_valid() {
        return Err(Error::InvalidArgument(format!(
            "ROI {:?} has no area on the feature map",
            roi.to_array()
        )));
    }
    let extent = BBox::new(0.0, 0.0, features.width as f64, features.height as f64);
    if proj.intersection_area(&extent) <= 0.0 {
        return Err(Error::EmptyRoi(roi.to_array()));
    }
    let mut feature = RoiFeature::zeros(features.channels, pool_h, pool_w);
    let mut argmax = vec![None; feature.data.len()];
    let (len_x, len_y) = (proj.width(), proj.height());
    for py in 0..pool_h {
        let (y0, y1) = bin_range(proj.y_min, len_y, pool_h, py, features.height);
        for px in 0..pool_w {
            let (x0, x1) = bin_range(proj.x_min, len_x, pool_w, px, features.width);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            for c in 0..features.channels {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = features.index(c, y, x);
                        if features.data[idx] > best {
                            best = features.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let out = (c * pool_h + py) * pool_w + px;
                feature.data[out] = best;
                argmax[out] = Some(best_idx);
            }
        }
    }
    Ok(PooledRoi { feature, argmax })
}

/// Routes pooled gradients back to the feature positions that won the max.
pub fn roi_pool_backward(grad: &[f64], argmax: &[Option<usize>], d_features: &mut Volume) {
    for (g, a) in grad.iter().zip(argmax) {
        if let Some(idx) = a {
            d_features.data[*idx] += g;
        }
    }
}

/// Batched single-tap ROI pooling that remembers its argmax routing.
#[derive(Debug, Clone)]
pub struct RoiPool {
    pub pool_h: usize,
    pub pool_w: usize,
    cache: Vec<Vec<Option<usize>>>,
    feature_shape: (usize, usize, usize),
}

impl RoiPool {
    pub fn new(pool_h: usize, pool_w: usize) -> Self {
        Self {
            pool_h,
            pool_w,
            cache: Vec::new(),
            feature_shape: (0, 0, 0),
        }
    }

    /// One flattened ROI feature per row.
    pub fn forward(&mut self, features: &Volume, stride: f64, rois: &[BBox]) -> Result<Matrix> {
        let dim = features.channels * self.pool_h * self.pool_w;
        let mut out = Matrix::zeros(rois.len(), dim);
        self.cache.clear();
        self.feature_shape = features.shape();
        for (r, roi) in rois.iter().enumerate() {
            let pooled = roi_pool(features, stride, roi, self.pool_h, self.pool_w)?;
            out.row_mut(r).copy_from_slice(&pooled.feature.data);
            self.cache.push(pooled.argmax);
        }
        Ok(out)
    }

    pub fn backward(&self, grad: &Matrix) -> Volume {
        let (c, h, w) = self.feature_shape;
        let mut d = Volume::zeros(c, h, w);
        for (r, argmax) in self.cache.iter().enumerate() {
            roi_pool_backward(grad.row(r), argmax, &mut d);
        }
        d
    }
}

/// Two hidden fully connected layers followed by a `(C+1)`-way classifier and
/// `4·C` class-specific box deltas.
#[derive(Debug, Clone)]
pub struct RoiHead {
    fc1: Linear,
    relu1: Relu,
    fc2: Linear,
    relu2: Relu,
    cls: Linear,
    reg: Linear,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiHeadOutput {
    /// `n × (C+1)` logits; column 0 is background.
    pub logits: Matrix,
    /// `n × 4C` deltas; class `c` (1-based) owns columns `4(c-1)..4c`.
    pub deltas: Matrix,
}

impl RoiHeadOutput {
    pub fn probabilities(&self) -> Matrix {
        let mut p = Matrix::zeros(self.logits.rows, self.logits.cols);
        for r in 0..self.logits.rows {
            p.row_mut(r).copy_from_slice(&softmax(self.logits.row(r)));
        }
        p
    }
}

impl RoiHead {
    pub fn new<R: Rng>(in_features: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new("roi_head.fc1", in_features, hidden, Init::He, rng),
            relu1: Relu::default(),
            fc2: Linear::new("roi_head.fc2", hidden, hidden, Init::He, rng),
            relu2: Relu::default(),
            cls: Linear::new("roi_head.cls", hidden, num_classes + 1, Init::Gaussian(0.01), rng),
            reg: Linear::new("roi_head.reg", hidden, 4 * num_classes, Init::Gaussian(0.001), rng),
            num_classes,
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features
    }

    pub fn forward(&mut self, x: &Matrix) -> RoiHeadOutput {
        let mut h = self.fc1.forward(x);
        self.relu1.forward_in_place(&mut h.data);
        let mut h = self.fc2.forward(&h);
        self.relu2.forward_in_place(&mut h.data);
        RoiHeadOutput {
            logits: self.cls.forward(&h),
            deltas: self.reg.forward(&h),
        }
    }

    pub fn backward(&mut self, d_logits: &Matrix, d_deltas: &Matrix) -> Matrix {
        let mut dh = self.cls.backward(d_logits);
        let dr = self.reg.backward(d_deltas);
        for (a, b) in dh.data.iter_mut().zip(&dr.data) {
            *a += b;
        }
        self.relu2.backward_in_place(&mut dh.data);
        let mut dh = self.fc2.backward(&dh);
        self.relu1.backward_in_place(&mut dh.data);
        self.fc1.backward(&dh)
    }
}

impl Module for RoiHead {
    fn params(&self) -> Vec<&Param> {
        [
            self.fc1.params(),
            self.fc2.params(),
            self.cls.params(),
            self.reg.params(),
        ]
        .concat()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v.extend(self.cls.params_mut());
        v.extend(self.reg.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_pool_to_constant() {
        let f = Volume::from_data(2, 4, 4, vec![3.5; 32]);
        let p = roi_pool(&f, 4.0, &BBox::new(1.0, 2.0, 13.0, 15.0), 2, 3).unwrap();
        assert!(p.feature.data.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn single_cell_roi_repeats_that_cell() {
        let f = Volume::from_data(2, 3, 3, (0..18).map(|v| v as f64).collect());
        // cell (row 1, col 2) at stride 8
        let p = roi_pool(&f, 8.0, &BBox::new(16.0, 8.0, 24.0, 16.0), 2, 2).unwrap();
        assert_eq!(&p.feature.data[..4], &[5.0; 4]);
        assert_eq!(&p.feature.data[4..], &[14.0; 4]);
    }

    #[test]
    fn roi_outside_map_is_an_error() {
        let f = Volume::zeros(1, 4, 4);
        let err = roi_pool(&f, 4.0, &BBox::new(20.0, 20.0, 30.0, 30.0), 2, 2).unwrap_err();
        assert!(matches!(err, Error::EmptyRoi(_)));
    }

    #[test]
    fn softmax_rows_of_head_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut head = RoiHead::new(12, 16, 7, &mut rng);
        let x = Matrix::from_data(3, 12, (0..36).map(|i| (i as f64 * 0.3).sin()).collect());
        let out = head.forward(&x);
        assert_eq!((out.logits.cols, out.deltas.cols), (8, 28));
        let p = out.probabilities();
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
