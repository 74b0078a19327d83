//! Two-stage detector: shared backbone, RPN, ROI pooling (single tap or
//! multi-scale fused) and a classification/regression head, trained end to
//! end by summing RPN and ROI losses each step.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{finalize_detections, InferenceConfig, StepLoss};
use crate::boxes::{decode, BBox, BoxDelta, Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::nets::backbone::{pad_to_stride, Backbone, BackboneConfig, Taps};
use crate::nets::layers::{Module, Param};
use crate::nets::msfuse::MsFuse;
use crate::nets::roi::{RoiHead, RoiPool};
use crate::nets::rpn::{propose, ProposalConfig, RpnHead, ScoredBox};
use crate::nets::tensor::{Matrix, Volume};
use crate::priors::{generate_anchors, AnchorSpec};
use crate::sampling::{
    assign_roi_targets, assign_rpn_targets, ohem_select, sample_minibatch, AssignmentConfig, Label, OhemConfig,
    Targets,
};
use crate::trainer::loss::{multitask_loss, LossOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrcnnVariant {
    Plain,
    MultiScale,
    Ohem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrcnnConfig {
    pub backbone: BackboneConfig,
    /// Tap feeding the RPN and single-tap ROI pooling.
    pub rpn_tap: String,
    pub anchors: AnchorSpec,
    pub rpn_channels: usize,
    pub pool_size: usize,
    pub hidden: usize,
    /// Taps fused by the multi-scale variant, bottom to top.
    #[serde(default)]
    pub fusion_taps: Vec<String>,
    #[serde(default = "one")]
    pub fusion_scale_init: f64,
    pub train_proposals: ProposalConfig,
    pub test_proposals: ProposalConfig,
    /// Divisors applied to ROI regression targets.
    pub bbox_stds: [f64; 4],
    pub inference: InferenceConfig,
}

fn one() -> f64 {
    1.0
}

impl FrcnnConfig {
    pub fn validate(&self, variant: FrcnnVariant) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        if !self.backbone.taps.contains(&self.rpn_tap) {
            return Err(Error::Config(format!("rpn_tap `{}` is not a backbone tap", self.rpn_tap)));
        }
        if variant == FrcnnVariant::MultiScale {
            if self.fusion_taps.len() < 3 {
                return Err(Error::Config(format!(
                    "multi-scale fusion needs three taps, got {}",
                    self.fusion_taps.len()
                )));
            }
            for t in &self.fusion_taps {
                if !self.backbone.taps.contains(t) {
                    return Err(Error::Config(format!("fusion tap `{t}` is not a backbone tap")));
                }
            }
        }
        if self.pool_size == 0 || self.hidden == 0 || self.rpn_channels == 0 {
            return Err(Error::Config("pool_size, hidden and rpn_channels must be positive".into()));
        }
        if self.bbox_stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("bbox_stds must be positive".into()));
        }
        Ok(())
    }
}

/// Options shared by every training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub assign: AssignmentConfig,
    pub ohem: OhemConfig,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
enum RoiFeatures {
    Single(RoiPool),
    Fused(MsFuse),
}

#[derive(Debug, Clone)]
pub struct FasterRcnn {
    pub config: FrcnnConfig,
    pub variant: FrcnnVariant,
    pub num_classes: usize,
    backbone: Backbone,
    rpn: RpnHead,
    features: RoiFeatures,
    head: RoiHead,
    anchor_cache: BTreeMap<(usize, usize), Vec<BBox>>,
}

impl FasterRcnn {
    pub fn new<R: Rng>(config: &FrcnnConfig, variant: FrcnnVariant, num_classes: usize, rng: &mut R) -> Result<Self> {
        config.validate(variant)?;
        let backbone = Backbone::new(&config.backbone, rng)?;
        let c = config.backbone.channels_of(&config.rpn_tap).expect("validated");
        let rpn = RpnHead::new(c, config.rpn_channels, config.anchors.anchors_per_location(), rng);
        let p = config.pool_size;
        let features = match variant {
            FrcnnVariant::MultiScale => {
                let chans: Vec<usize> = config
                    .fusion_taps
                    .iter()
                    .map(|t| config.backbone.channels_of(t).expect("validated"))
                    .collect();
                RoiFeatures::Fused(MsFuse::new(&chans, c, p, p, config.fusion_scale_init, rng)?)
            }
            _ => RoiFeatures::Single(RoiPool::new(p, p)),
        };
        let head = RoiHead::new(c * p * p, config.hidden, num_classes, rng);
        Ok(Self {
            config: config.clone(),
            variant,
            num_classes,
            backbone,
            rpn,
            features,
            head,
            anchor_cache: BTreeMap::new(),
        })
    }

    fn anchors(&mut self, h: usize, w: usize) -> Vec<BBox> {
        let cfg = &self.config;
        self.anchor_cache
            .entry((h, w))
            .or_insert_with(|| {
                let mut spec = cfg
                    .backbone
                    .tap_spec(&cfg.rpn_tap, 1, 1)
                    .expect("validated tap");
                spec.height = h;
                spec.width = w;
                generate_anchors(&spec, &cfg.anchors)
            })
            .clone()
    }

    fn roi_features(&mut self, taps: &Taps, rois: &[BBox]) -> Result<Matrix> {
        match &mut self.features {
            RoiFeatures::Single(pool) => {
                let s = self.config.backbone.stride_of(&self.config.rpn_tap).expect("validated") as f64;
                pool.forward(&taps[&self.config.rpn_tap], s, rois)
            }
            RoiFeatures::Fused(fuse) => {
                let inputs: Vec<(&Volume, f64)> = self
                    .config
                    .fusion_taps
                    .iter()
                    .map(|t| (&taps[t], self.config.backbone.stride_of(t).expect("validated") as f64))
                    .collect();
                fuse.forward(&inputs, rois)
            }
        }
    }

    fn roi_features_backward(&mut self, grad: &Matrix) -> Taps {
        let mut out = Taps::new();
        match &mut self.features {
            RoiFeatures::Single(pool) => {
                out.insert(self.config.rpn_tap.clone(), pool.backward(grad));
            }
            RoiFeatures::Fused(fuse) => {
                for (t, g) in self.config.fusion_taps.iter().zip(fuse.backward(grad)) {
                    add_tap(&mut out, t, g);
                }
            }
        }
        out
    }

    /// ROI loss on the given rows of `targets`; also returns the delta
    /// gradient as an `n × 4C` matrix.
    fn roi_loss(
        &self,
        logits: &Matrix,
        deltas: &Matrix,
        targets: &Targets,
        rows: &[usize],
        gts: &[GroundTruth],
        lambda: f64,
    ) -> (LossOutput, Matrix) {
        let stds = self.config.bbox_stds;
        let mut cls = Vec::with_capacity(rows.len());
        let mut pred = Vec::with_capacity(rows.len());
        let mut tgt = Vec::with_capacity(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            match (targets.labels[i], targets.gt[i], targets.deltas[i]) {
                (Label::Foreground, Some(g), Some(d)) => {
                    let c = gts[g].class_id;
                    cls.push(c);
                    let off = 4 * (c - 1);
                    let row = deltas.row(r);
                    pred.push([row[off], row[off + 1], row[off + 2], row[off + 3]]);
                    let d = d.to_array();
                    tgt.push(Some([d[0] / stds[0], d[1] / stds[1], d[2] / stds[2], d[3] / stds[3]]));
                }
                _ => {
                    cls.push(0);
                    pred.push([0.0; 4]);
                    tgt.push(None);
                }
            }
        }
        let loss = multitask_loss(logits, &cls, &pred, &tgt, lambda);
        let mut d = Matrix::zeros(rows.len(), deltas.cols);
        for r in 0..rows.len() {
            if cls[r] > 0 {
                let off = 4 * (cls[r] - 1);
                d.row_mut(r)[off..off + 4].copy_from_slice(&loss.d_deltas[r]);
            }
        }
        (loss, d)
    }

    /// Labels the ROIs, selects the training subset (random minibatch, or
    /// hard examples for the OHEM variant), runs the head and back-propagates
    /// into the ROI feature extractor. Returns tap gradients.
    pub fn roi_step<R: Rng>(
        &mut self,
        taps: &Taps,
        rois: &[BBox],
        gts: &[GroundTruth],
        opts: &StepOptions,
        rng: &mut R,
    ) -> Result<(f64, f64, Taps)> {
        for g in gts {
            if g.class_id == 0 || g.class_id > self.num_classes {
                return Err(Error::InvalidArgument(format!("class id {} out of range", g.class_id)));
            }
        }
        let targets = assign_roi_targets(rois, gts, &opts.assign)?;
        let selected = match self.variant {
            FrcnnVariant::Ohem => {
                let candidates: Vec<usize> = (0..rois.len()).filter(|&i| targets.labels[i] != Label::Ignore).collect();
                if candidates.is_empty() {
                    Vec::new()
                } else {
                    // loss over every candidate, no gradient
                    let cand_rois: Vec<BBox> = candidates.iter().map(|&i| rois[i]).collect();
                    let feats = self.roi_features(taps, &cand_rois)?;
                    let out = self.head.forward(&feats);
                    let (loss, _) = self.roi_loss(&out.logits, &out.deltas, &targets, &candidates, gts, opts.lambda);
                    let mut s: Vec<usize> = ohem_select(&loss.per_example, &cand_rois, &opts.ohem)
                        .into_iter()
                        .map(|k| candidates[k])
                        .collect();
                    s.sort_unstable();
                    s
                }
            }
            _ => sample_minibatch(&targets.labels, opts.assign.roi_batch, opts.assign.roi_fg_fraction, rng),
        };
        if selected.is_empty() {
            return Ok((0.0, 0.0, Taps::new()));
        }
        let sel_rois: Vec<BBox> = selected.iter().map(|&i| rois[i]).collect();
        let feats = self.roi_features(taps, &sel_rois)?;
        let out = self.head.forward(&feats);
        let (loss, d_deltas) = self.roi_loss(&out.logits, &out.deltas, &targets, &selected, gts, opts.lambda);
        let d_feats = self.head.backward(&loss.d_logits, &d_deltas);
        Ok((loss.cls, loss.reg, self.roi_features_backward(&d_feats)))
    }

    /// Forward and backward for one image; gradients accumulate into the
    /// parameters. `image` is preprocessed and unpadded. `rois` replaces the
    /// proposals-plus-ground-truth ROI set when given.
    pub fn train_step<R: Rng>(
        &mut self,
        image: &Volume,
        gts: &[GroundTruth],
        opts: &StepOptions,
        rng: &mut R,
        rois: Option<&[BBox]>,
    ) -> Result<StepLoss> {
        let (img_w, img_h) = (image.width as f64, image.height as f64);
        let (x, _) = pad_to_stride(image, self.config.backbone.max_tap_stride());
        let taps = self.backbone.forward(&x);
        let feat = &taps[&self.config.rpn_tap];
        let anchors = self.anchors(feat.height, feat.width);
        self.rpn.check_alignment(feat, anchors.len())?;
        let rpn_out = self.rpn.forward(feat);

        let t = assign_rpn_targets(&anchors, gts, img_w, img_h, &opts.assign)?;
        let sel = sample_minibatch(&t.labels, opts.assign.rpn_batch, opts.assign.rpn_fg_fraction, rng);
        let mut logits = Matrix::zeros(sel.len(), 2);
        let mut cls = Vec::with_capacity(sel.len());
        let mut pred = Vec::with_capacity(sel.len());
        let mut tgt = Vec::with_capacity(sel.len());
        for (r, &i) in sel.iter().enumerate() {
            logits.row_mut(r)[1] = rpn_out.logits[i];
            cls.push(usize::from(t.labels[i] == Label::Foreground));
            pred.push(rpn_out.deltas[i].to_array());
            tgt.push(t.deltas[i].map(BoxDelta::to_array));
        }
        let rpn_loss = multitask_loss(&logits, &cls, &pred, &tgt, opts.lambda);
        let mut d_logits = vec![0.0; anchors.len()];
        let mut d_deltas = vec![[0.0; 4]; anchors.len()];
        for (r, &i) in sel.iter().enumerate() {
            // logits are [0, z]: only the second column depends on z
            d_logits[i] = rpn_loss.d_logits.row(r)[1];
            d_deltas[i] = rpn_loss.d_deltas[r];
        }
        let d_rpn = self.rpn.backward(&d_logits, &d_deltas);

        let rois: Vec<BBox> = match rois {
            Some(r) => r.to_vec(),
            None => {
                let mut r: Vec<BBox> = propose(
                    &rpn_out.objectness(),
                    &rpn_out.deltas,
                    &anchors,
                    &self.config.train_proposals,
                    img_w,
                    img_h,
                )
                .into_iter()
                .map(|p| p.bbox)
                .collect();
                r.extend(gts.iter().map(|g| g.bbox));
                r
            }
        };
        let (roi_cls, roi_reg, mut grads) = self.roi_step(&taps, &rois, gts, opts, rng)?;
        add_tap(&mut grads, &self.config.rpn_tap.clone(), d_rpn);
        self.backbone.backward(&grads);

        let total = rpn_loss.total + roi_cls + opts.lambda * roi_reg;
        Ok(StepLoss {
            rpn_cls: rpn_loss.cls,
            rpn_reg: rpn_loss.reg,
            roi_cls,
            roi_reg,
            total,
            ..StepLoss::default()
        })
    }

    fn rpn_proposals(&mut self, image: &Volume, cfg: &ProposalConfig) -> Result<(Taps, Vec<ScoredBox>)> {
        let (img_w, img_h) = (image.width as f64, image.height as f64);
        let (x, _) = pad_to_stride(image, self.config.backbone.max_tap_stride());
        let taps = self.backbone.forward(&x);
        let feat = &taps[&self.config.rpn_tap];
        let anchors = self.anchors(feat.height, feat.width);
        self.rpn.check_alignment(feat, anchors.len())?;
        let out = self.rpn.forward(feat);
        let props = propose(&out.objectness(), &out.deltas, &anchors, cfg, img_w, img_h);
        Ok((taps, props))
    }

    /// Score-ranked RPN proposals for a preprocessed image.
    pub fn proposals(&mut self, image: &Volume, cfg: &ProposalConfig) -> Result<Vec<ScoredBox>> {
        Ok(self.rpn_proposals(image, cfg)?.1)
    }

    /// Final detections for a preprocessed image.
    pub fn detect(&mut self, image: &Volume) -> Result<Vec<Detection>> {
        let (img_w, img_h) = (image.width as f64, image.height as f64);
        let cfg = self.config.test_proposals;
        let (taps, props) = self.rpn_proposals(image, &cfg)?;
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let feats = self.roi_features(&taps, &rois)?;
        let out = self.head.forward(&feats);
        let probs = out.probabilities();
        let stds = self.config.bbox_stds;
        let mut candidates = vec![Vec::new(); self.num_classes];
        for (r, roi) in rois.iter().enumerate() {
            let p = probs.row(r);
            let d = out.deltas.row(r);
            for c in 1..=self.num_classes {
                if p[c] < self.config.inference.score_threshold {
                    continue;
                }
                let off = 4 * (c - 1);
                let delta = BoxDelta::new(d[off] * stds[0], d[off + 1] * stds[1], d[off + 2] * stds[2], d[off + 3] * stds[3]);
                candidates[c - 1].push((decode(&delta, roi, img_w, img_h), p[c]));
            }
        }
        Ok(finalize_detections(candidates, &self.config.inference))
    }
}

fn add_tap(grads: &mut Taps, name: &str, g: Volume) {
    match grads.get_mut(name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

impl Module for FasterRcnn {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.rpn.params());
        if let RoiFeatures::Fused(f) = &self.features {
            v.extend(f.params());
        }
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.rpn.params_mut());
        if let RoiFeatures::Fused(f) = &mut self.features {
            v.extend(f.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}
