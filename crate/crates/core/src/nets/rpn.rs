//! Region proposal network head and proposal generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Init, Module, Param, Relu};
use super::tensor::{sigmoid, Volume};
use crate::boxes::{decode_unclipped, greedy_nms_indices, score_order, BBox, BoxDelta};
use crate::error::{Error, Result};

/// Per-anchor RPN outputs, index-aligned with the anchor list of the tap.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    /// Raw objectness logits; `sigmoid` gives the foreground probability.
    pub logits: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
}

impl RpnOutput {
    pub fn objectness(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RpnHead {
    conv: Conv2d,
    relu: Relu,
    cls: Conv2d,
    reg: Conv2d,
    pub anchors_per_location: usize,
    hw: (usize, usize),
}

impl RpnHead {
    pub fn new<R: Rng>(in_channels: usize, mid_channels: usize, anchors_per_location: usize, rng: &mut R) -> Self {
        let a = anchors_per_location;
        Self {
            conv: Conv2d::new("rpn.conv", in_channels, mid_channels, 3, 1, 1, Init::He, rng),
            relu: Relu::default(),
            cls: Conv2d::new("rpn.cls", mid_channels, a, 1, 1, 0, Init::Gaussian(0.01), rng),
            reg: Conv2d::new("rpn.reg", mid_channels, 4 * a, 1, 1, 0, Init::Gaussian(0.01), rng),
            anchors_per_location: a,
            hw: (0, 0),
        }
    }

    /// Fails when the anchor list does not match `H·W·A` for this feature map.
    pub fn check_alignment(&self, features: &Volume, num_anchors: usize) -> Result<()> {
        let expected = features.plane() * self.anchors_per_location;
        if expected != num_anchors {
            return Err(Error::Config(format!(
                "RPN head emits {expected} predictions ({}x{}x{}) but {num_anchors} anchors were generated",
                features.height, features.width, self.anchors_per_location
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, features: &Volume) -> RpnOutput {
        let mut hidden = self.conv.forward(features);
        self.relu.forward_in_place(&mut hidden.data);
        let cls = self.cls.forward(&hidden);
        let reg = self.reg.forward(&hidden);
        let (h, w) = (features.height, features.width);
        self.hw = (h, w);
        let a = self.anchors_per_location;
        let plane = h * w;
        let mut logits = vec![0.0; plane * a];
        let mut deltas = vec![BoxDelta::default(); plane * a];
        for cell in 0..plane {
            for k in 0..a {
                logits[cell * a + k] = cls.data[k * plane + cell];
                let d = |j: usize| reg.data[(4 * k + j) * plane + cell];
                deltas[cell * a + k] = BoxDelta::new(d(0), d(1), d(2), d(3));
            }
        }
        RpnOutput { logits, deltas }
    }

    /// Takes gradients w.r.t. the per-anchor logits and deltas; returns the
    /// gradient w.r.t. the input features.
    pub fn backward(&mut self, d_logits: &[f64], d_deltas: &[[f64; 4]]) -> Volume {
        let (h, w) = self.hw;
        let a = self.anchors_per_location;
        let plane = h * w;
        let mut d_cls = Volume::zeros(a, h, w);
        let mut d_reg = Volume::zeros(4 * a, h, w);
        for cell in 0..plane {
            for k in 0..a {
                d_cls.data[k * plane + cell] = d_logits[cell * a + k];
                for j in 0..4 {
                    d_reg.data[(4 * k + j) * plane + cell] = d_deltas[cell * a + k][j];
                }
            }
        }
        let mut d_hidden = self.cls.backward(&d_cls);
        d_hidden.add_assign(&self.reg.backward(&d_reg));
        self.relu.backward_in_place(&mut d_hidden.data);
        self.conv.backward(&d_hidden)
    }
}

impl Module for RpnHead {
    fn params(&self) -> Vec<&Param> {
        [self.conv.params(), self.cls.params(), self.reg.params()].concat()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.cls.params_mut());
        v.extend(self.reg.params_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub nms_threshold: f64,
    pub post_nms_top_n: usize,
}

impl ProposalConfig {
    pub fn train_default() -> Self {
        Self {
            pre_nms_top_n: 2000,
            nms_threshold: 0.7,
            post_nms_top_n: 300,
        }
    }

    pub fn test_default() -> Self {
        Self {
            pre_nms_top_n: 1000,
            nms_threshold: 0.7,
            post_nms_top_n: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Decode, clip, drop degenerate boxes, keep the top `pre_nms_top_n` by
/// objectness, run class-agnostic NMS and return at most `post_nms_top_n`.
pub fn propose(
    objectness: &[f64],
    deltas: &[BoxDelta],
    anchors: &[BBox],
    cfg: &ProposalConfig,
    image_w: f64,
    image_h: f64,
) -> Vec<ScoredBox> {
    assert_eq!(objectness.len(), anchors.len());
    assert_eq!(deltas.len(), anchors.len());
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for ((d, a), &s) in deltas.iter().zip(anchors).zip(objectness) {
        let b = decode_unclipped(d, a, crate::boxes::DEFAULT_LOG_SIZE_CLAMP).clip(image_w, image_h);
        if b.is_valid() {
            boxes.push(b);
            scores.push(s);
        }
    }
    let mut top = score_order(&scores);
    top.truncate(cfg.pre_nms_top_n);
    let top_boxes: Vec<BBox> = top.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    greedy_nms_indices(&top_boxes, &top_scores, None, cfg.nms_threshold)
        .into_iter()
        .take(cfg.post_nms_top_n)
        .map(|i| ScoredBox {
            bbox: top_boxes[i],
            score: top_scores[i],
        })
        .collect()
}
