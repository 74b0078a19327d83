//! Multi-scale ROI fusion.
//!
//! Each ROI is max-pooled from three taps. Every pooled volume is L2-normalized
//! across channels at each bin, multiplied by a learnable per-channel scale,
//! and the three are concatenated along channels. A learned 1×1 projection then
//! compresses the stack back to the channel count of the single-tap head.

use rand::Rng;

use super::layers::{Module, Param};
use super::roi::roi_pool;
use super::tensor::{gemm, Matrix, Volume};
use crate::boxes::BBox;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
struct RoiCache {
    argmax: Vec<Vec<Option<usize>>>,
    normalized: Vec<Vec<f64>>,
    norms: Vec<Vec<f64>>,
    stacked: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MsFuse {
    pub scales: Vec<Param>,
    pub proj_weight: Param,
    pub proj_bias: Param,
    pub tap_channels: Vec<usize>,
    pub compress_channels: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    cache: Vec<RoiCache>,
    tap_shapes: Vec<(usize, usize, usize)>,
}

impl MsFuse {
    pub fn new<R: Rng>(
        tap_channels: &[usize],
        compress_channels: usize,
        pool_h: usize,
        pool_w: usize,
        scale_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if tap_channels.len() < 3 {
            return Err(Error::Config(format!(
                "multi-scale fusion needs three taps, got {}",
                tap_channels.len()
            )));
        }
        let total: usize = tap_channels.iter().sum();
        let scales = tap_channels
            .iter()
            .enumerate()
            .map(|(t, &c)| Param::filled(format!("ms_fuse.scale.{t}"), vec![c], scale_init, false))
            .collect();
        let mut proj_weight = Param::gaussian(
            "ms_fuse.proj.weight",
            vec![compress_channels, total],
            (2.0 / total as f64).sqrt(),
            rng,
        );
        proj_weight.decay = true;
        Ok(Self {
            scales,
            proj_weight,
            proj_bias: Param::zeros("ms_fuse.proj.bias", vec![compress_channels], false),
            tap_channels: tap_channels.to_vec(),
            compress_channels,
            pool_h,
            pool_w,
            cache: Vec::new(),
            tap_shapes: Vec::new(),
        })
    }

    pub fn output_features(&self) -> usize {
        self.compress_channels * self.pool_h * self.pool_w
    }

    /// `taps` pairs each feature volume with its stride. Returns one flattened
    /// `compress × pool_h × pool_w` feature per ROI row.
    pub fn forward(&mut self, taps: &[(&Volume, f64)], rois: &[BBox]) -> Result<Matrix> {
        if taps.len() != self.tap_channels.len() {
            return Err(Error::Config(format!(
                "multi-scale fusion configured for {} taps, got {}",
                self.tap_channels.len(),
                taps.len()
            )));
        }
        let bins = self.pool_h * self.pool_w;
        let total: usize = self.tap_channels.iter().sum();
        self.tap_shapes = taps.iter().map(|(v, _)| v.shape()).collect();
        self.cache.clear();
        let mut out = Matrix::zeros(rois.len(), self.output_features());
        for (r, roi) in rois.iter().enumerate() {
            let mut stacked = vec![0.0; total * bins];
            let mut cache = RoiCache {
                argmax: Vec::new(),
                normalized: Vec::new(),
                norms: Vec::new(),
                stacked: Vec::new(),
            };
            let mut offset = 0;
            for (t, (vol, stride)) in taps.iter().enumerate() {
                let pooled = roi_pool(vol, *stride, roi, self.pool_h, self.pool_w)?;
                let c = vol.channels;
                let (normalized, norms) = l2_normalize_channels(&pooled.feature.data, c, bins);
                for ch in 0..c {
                    let s = self.scales[t].value[ch];
                    for p in 0..bins {
                        stacked[(offset + ch) * bins + p] = s * normalized[ch * bins + p];
                    }
                }
                offset += c;
                cache.argmax.push(pooled.argmax);
                cache.normalized.push(normalized);
                cache.norms.push(norms);
            }
            let row = out.row_mut(r);
            for (o, b) in self.proj_bias.value.iter().enumerate() {
                row[o * bins..(o + 1) * bins].fill(*b);
            }
            gemm(
                false,
                false,
                self.compress_channels,
                bins,
                total,
                1.0,
                &self.proj_weight.value,
                &stacked,
                1.0,
                row,
            );
            cache.stacked = stacked;
            self.cache.push(cache);
        }
        Ok(out)
    }

    /// Returns one feature gradient per tap.
    pub fn backward(&mut self, grad: &Matrix) -> Vec<Volume> {
        let bins = self.pool_h * self.pool_w;
        let total: usize = self.tap_channels.iter().sum();
        let mut d_taps: Vec<Volume> = self
            .tap_shapes
            .iter()
            .map(|&(c, h, w)| Volume::zeros(c, h, w))
            .collect();
        for (r, cache) in self.cache.iter().enumerate() {
            let g = grad.row(r);
            for (o, db) in self.proj_bias.grad.iter_mut().enumerate() {
                *db += g[o * bins..(o + 1) * bins].iter().sum::<f64>();
            }
            gemm(
                false,
                true,
                self.compress_channels,
                total,
                bins,
                1.0,
                g,
                &cache.stacked,
                1.0,
                &mut self.proj_weight.grad,
            );
            let mut d_stacked = vec![0.0; total * bins];
            gemm(
                true,
                false,
                total,
                bins,
                self.compress_channels,
                1.0,
                &self.proj_weight.value,
                g,
                0.0,
                &mut d_stacked,
            );
            let mut offset = 0;
            for (t, &c) in self.tap_channels.iter().enumerate() {
                let y = &cache.normalized[t];
                let norms = &cache.norms[t];
                let mut dy = vec![0.0; c * bins];
                for ch in 0..c {
                    let s = self.scales[t].value[ch];
                    let mut ds = 0.0;
                    for p in 0..bins {
                        let dz = d_stacked[(offset + ch) * bins + p];
                        ds += dz * y[ch * bins + p];
                        dy[ch * bins + p] = s * dz;
                    }
                    self.scales[t].grad[ch] += ds;
                }
                let dx = l2_normalize_backward(y, norms, &dy, c, bins);
                super::roi::roi_pool_backward(&dx, &cache.argmax[t], &mut d_taps[t]);
                offset += c;
            }
        }
        d_taps
    }
}

/// Normalizes each bin's channel vector to unit length. Returns the normalized
/// values and the per-bin norms.
pub fn l2_normalize_channels(x: &[f64], channels: usize, bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut norms = vec![0.0; bins];
    for ch in 0..channels {
        for p in 0..bins {
            norms[p] += x[ch * bins + p] * x[ch * bins + p];
        }
    }
    for n in &mut norms {
        *n = (*n + NORM_EPS).sqrt();
    }
    let mut y = vec![0.0; channels * bins];
    for ch in 0..channels {
        for p in 0..bins {
            y[ch * bins + p] = x[ch * bins + p] / norms[p];
        }
    }
    (y, norms)
}

fn l2_normalize_backward(y: &[f64], norms: &[f64], dy: &[f64], channels: usize, bins: usize) -> Vec<f64> {
    let mut dot = vec![0.0; bins];
    for ch in 0..channels {
        for p in 0..bins {
            dot[p] += y[ch * bins + p] * dy[ch * bins + p];
        }
    }
    let mut dx = vec![0.0; channels * bins];
    for ch in 0..channels {
        for p in 0..bins {
            let i = ch * bins + p;
            dx[i] = (dy[i] - y[i] * dot[p]) / norms[p];
        }
    }
    dx
}

impl Module for MsFuse {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.scales.iter().collect();
        v.push(&self.proj_weight);
        v.push(&self.proj_bias);
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.scales.iter_mut().collect();
        v.push(&mut self.proj_weight);
        v.push(&mut self.proj_bias);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(c: usize, h: usize, w: usize, seed: f64) -> Volume {
        Volume::from_data(c, h, w, (0..c * h * w).map(|i| ((i as f64 + seed) * 0.77).sin().abs() + 0.1).collect())
    }

    #[test]
    fn needs_three_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(MsFuse::new(&[4, 4], 4, 2, 2, 1.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn normalized_bins_have_unit_norm() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 3.0).collect();
        let (y, _) = l2_normalize_channels(&x, 3, 4);
        for p in 0..4 {
            let n: f64 = (0..3).map(|c| y[c * 4 + p].powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn output_width_is_compress_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fuse = MsFuse::new(&[2, 3, 5], 7, 2, 2, 1.0, &mut rng).unwrap();
        let (a, b, c) = (vol(2, 16, 16, 0.0), vol(3, 8, 8, 1.0), vol(5, 4, 4, 2.0));
        let out = fuse
            .forward(&[(&a, 2.0), (&b, 4.0), (&c, 8.0)], &[BBox::new(2.0, 2.0, 20.0, 18.0)])
            .unwrap();
        assert_eq!(out.cols, 7 * 4);
    }

    #[test]
    fn duplicated_tap_with_identity_projection_is_scaled_normalized_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 3;
        let mut fuse = MsFuse::new(&[c, c, c], c, 2, 2, 1.0, &mut rng).unwrap();
        fuse.proj_weight.value.fill(0.0);
        for i in 0..c {
            fuse.proj_weight.value[i * 3 * c + i] = 1.0;
        }
        let f = vol(c, 8, 8, 5.0);
        let roi = BBox::new(4.0, 8.0, 28.0, 30.0);
        let out = fuse.forward(&[(&f, 4.0), (&f, 4.0), (&f, 4.0)], &[roi]).unwrap();
        let pooled = roi_pool(&f, 4.0, &roi, 2, 2).unwrap();
        let (expect, _) = l2_normalize_channels(&pooled.feature.data, c, 4);
        for (a, b) in out.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
