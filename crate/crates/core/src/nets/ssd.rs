//! SSD auxiliary layers, multibox prediction heads and trimming.
//!
//! The auxiliary network is a chain of named layers, each reading one named
//! volume (a backbone tap or an earlier auxiliary output) and producing one.
//! Prediction sources are any subset of those volumes; each gets a small 3×3
//! convolution emitting `C+1` class logits and 4 deltas per default box.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, Taps};
use super::layers::{Conv2d, GlobalAvgPool, Init, Module, Param, Relu};
use super::tensor::{Matrix, Volume};
use crate::boxes::BoxDelta;
use crate::error::{Error, Result};
use crate::priors::{DefaultBoxSpec, FeatureMapSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxKind {
    /// 1×1 reduction to half the channels, then a stride-2 3×3 conv.
    Conv { channels: usize },
    /// Global average pooling down to 1×1; parameter-free.
    GlobalPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxLayerSpec {
    pub name: String,
    pub input: String,
    pub output: String,
    pub kind: AuxKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdHeadConfig {
    pub aux_layers: Vec<AuxLayerSpec>,
    /// Ordered prediction sources.
    pub sources: Vec<String>,
    /// Aspect ratios per source (same order as `sources`).
    pub ratios: Vec<Vec<f64>>,
}

impl SsdHeadConfig {
    /// The seven-source layout: two backbone taps, four stride-2 auxiliary
    /// convs and a global pool on top.
    pub fn seven_source(conv4_3: &str, fc7: &str, aux_channels: [usize; 4]) -> Self {
        let conv = |name: &str, input: &str, output: &str, channels| AuxLayerSpec {
            name: name.into(),
            input: input.into(),
            output: output.into(),
            kind: AuxKind::Conv { channels },
        };
        let narrow = vec![1.0, 2.0, 0.5];
        let wide = vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0];
        Self {
            aux_layers: vec![
                conv("conv6", fc7, "conv6_2", aux_channels[0]),
                conv("conv7", "conv6_2", "conv7_2", aux_channels[1]),
                conv("conv8", "conv7_2", "conv8_2", aux_channels[2]),
                conv("conv9", "conv8_2", "conv9_2", aux_channels[3]),
                AuxLayerSpec {
                    name: "pool6".into(),
                    input: "conv9_2".into(),
                    output: "pool6".into(),
                    kind: AuxKind::GlobalPool,
                },
            ],
            sources: vec![
                conv4_3.into(),
                fc7.into(),
                "conv6_2".into(),
                "conv7_2".into(),
                "conv8_2".into(),
                "conv9_2".into(),
                "pool6".into(),
            ],
            ratios: vec![
                narrow.clone(),
                wide.clone(),
                wide.clone(),
                wide.clone(),
                wide,
                narrow.clone(),
                narrow,
            ],
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let mut available: BTreeSet<&str> = backbone.taps.iter().map(String::as_str).collect();
        for layer in &self.aux_layers {
            if !available.contains(layer.input.as_str()) {
                return Err(Error::Config(format!(
                    "aux layer `{}` reads `{}`, which is not produced earlier",
                    layer.name, layer.input
                )));
            }
            available.insert(&layer.output);
        }
        if self.sources.is_empty() {
            return Err(Error::Config("SSD head has no prediction sources".into()));
        }
        for s in &self.sources {
            if !available.contains(s.as_str()) {
                return Err(Error::Config(format!("prediction source `{s}` is not produced")));
            }
        }
        if self.ratios.len() != self.sources.len() {
            return Err(Error::Config(format!(
                "{} ratio lists for {} sources",
                self.ratios.len(),
                self.sources.len()
            )));
        }
        Ok(())
    }

    /// Geometry of each prediction source for a square input. `stride` is the
    /// effective cell size `ceil(input / width)` so 1×1 maps are centered.
    pub fn source_specs(&self, backbone: &BackboneConfig, input_size: usize) -> Result<Vec<FeatureMapSpec>> {
        self.validate(backbone)?;
        let mut maps: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for spec in backbone.tap_specs(input_size, input_size) {
            maps.insert(spec.name.clone(), (spec.height, spec.channels));
        }
        for layer in &self.aux_layers {
            let (h, c) = maps[&layer.input];
            let out = match layer.kind {
                AuxKind::Conv { channels } => (h.div_ceil(2), channels),
                AuxKind::GlobalPool => (1, c),
            };
            maps.insert(layer.output.clone(), out);
        }
        Ok(self
            .sources
            .iter()
            .map(|s| {
                let (h, c) = maps[s];
                FeatureMapSpec {
                    name: s.clone(),
                    stride: input_size.div_ceil(h),
                    height: h,
                    width: h,
                    channels: c,
                }
            })
            .collect())
    }

    pub fn default_box_spec(
        &self,
        backbone: &BackboneConfig,
        input_size: usize,
        s_min: f64,
        s_max: f64,
    ) -> Result<DefaultBoxSpec> {
        let spec = DefaultBoxSpec {
            s_min,
            s_max,
            maps: self.source_specs(backbone, input_size)?,
            ratios_per_map: self.ratios.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Removes auxiliary layers and every prediction source they feed.
///
/// A removed layer's output disappears. A conv layer whose input disappeared
/// is removed with it; a parameter-free pooling layer is re-attached to the
/// nearest surviving ancestor. Remaining source order is preserved.
pub fn trim_ssd(head: &SsdHeadConfig, removed: &BTreeSet<String>) -> Result<SsdHeadConfig> {
    for name in removed {
        if !head.aux_layers.iter().any(|l| &l.name == name) {
            return Err(Error::InvalidTrim(name.clone()));
        }
    }
    let mut rewired: BTreeMap<String, String> = BTreeMap::new();
    let mut dropped_outputs: BTreeSet<String> = BTreeSet::new();
    let mut kept = Vec::new();
    for layer in &head.aux_layers {
        let mut input = layer.input.clone();
        while let Some(up) = rewired.get(&input) {
            input = up.clone();
        }
        let lost_input = input != layer.input;
        let drop = removed.contains(&layer.name)
            || (lost_input && matches!(layer.kind, AuxKind::Conv { .. }));
        if drop {
            rewired.insert(layer.output.clone(), input);
            dropped_outputs.insert(layer.output.clone());
        } else {
            let mut l = layer.clone();
            l.input = input;
            kept.push(l);
        }
    }
    let (sources, ratios) = head
        .sources
        .iter()
        .zip(&head.ratios)
        .filter(|(s, _)| !dropped_outputs.contains(*s))
        .map(|(s, r)| (s.clone(), r.clone()))
        .unzip();
    Ok(SsdHeadConfig {
        aux_layers: kept,
        sources,
        ratios,
    })
}

#[derive(Debug, Clone)]
enum AuxLayer {
    Conv {
        spec: AuxLayerSpec,
        reduce: Conv2d,
        relu1: Relu,
        conv: Conv2d,
        relu2: Relu,
    },
    Pool {
        spec: AuxLayerSpec,
        pool: GlobalAvgPool,
    },
}

impl AuxLayer {
    fn spec(&self) -> &AuxLayerSpec {
        match self {
            AuxLayer::Conv { spec, .. } | AuxLayer::Pool { spec, .. } => spec,
        }
    }

    fn forward(&mut self, x: &Volume) -> Volume {
        match self {
            AuxLayer::Conv {
                reduce,
                relu1,
                conv,
                relu2,
                ..
            } => {
                let mut h = reduce.forward(x);
                relu1.forward_in_place(&mut h.data);
                let mut y = conv.forward(&h);
                relu2.forward_in_place(&mut y.data);
                y
            }
            AuxLayer::Pool { pool, .. } => pool.forward(x),
        }
    }

    fn backward(&mut self, g: &Volume) -> Volume {
        match self {
            AuxLayer::Conv {
                reduce,
                relu1,
                conv,
                relu2,
                ..
            } => {
                let mut g = g.clone();
                relu2.backward_in_place(&mut g.data);
                let mut dh = conv.backward(&g);
                relu1.backward_in_place(&mut dh.data);
                reduce.backward(&dh)
            }
            AuxLayer::Pool { pool, .. } => pool.backward(g),
        }
    }
}

/// Per-default-box predictions, index-aligned with `generate_default_boxes`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiboxOutput {
    /// `N × (C+1)` logits, column 0 background.
    pub logits: Matrix,
    pub deltas: Vec<BoxDelta>,
}

#[derive(Debug, Clone)]
struct PredictionHead {
    cls: Conv2d,
    reg: Conv2d,
    boxes_per_cell: usize,
    hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct SsdNet {
    pub config: SsdHeadConfig,
    pub num_classes: usize,
    aux: Vec<AuxLayer>,
    heads: Vec<PredictionHead>,
    backbone_taps: Vec<String>,
}

impl SsdNet {
    pub fn new<R: Rng>(
        config: &SsdHeadConfig,
        backbone: &BackboneConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(backbone)?;
        let mut channels: BTreeMap<String, usize> = backbone
            .taps
            .iter()
            .map(|t| (t.clone(), backbone.channels_of(t).expect("validated")))
            .collect();
        let mut aux = Vec::new();
        for spec in &config.aux_layers {
            let c_in = channels[&spec.input];
            let layer = match spec.kind {
                AuxKind::Conv { channels: c_out } => {
                    let mid = (c_out / 2).max(1);
                    AuxLayer::Conv {
                        spec: spec.clone(),
                        reduce: Conv2d::new(&format!("ssd.{}_1", spec.name), c_in, mid, 1, 1, 0, Init::He, rng),
                        relu1: Relu::default(),
                        conv: Conv2d::new(&format!("ssd.{}_2", spec.name), mid, c_out, 3, 2, 1, Init::He, rng),
                        relu2: Relu::default(),
                    }
                }
                AuxKind::GlobalPool => AuxLayer::Pool {
                    spec: spec.clone(),
                    pool: GlobalAvgPool::default(),
                },
            };
            let c_out = match spec.kind {
                AuxKind::Conv { channels } => channels,
                AuxKind::GlobalPool => c_in,
            };
            channels.insert(spec.output.clone(), c_out);
            aux.push(layer);
        }
        let heads = config
            .sources
            .iter()
            .zip(&config.ratios)
            .map(|(s, r)| {
                let b = r.len() + 1;
                let c = channels[s];
                PredictionHead {
                    cls: Conv2d::new(&format!("ssd.{s}.cls"), c, b * (num_classes + 1), 3, 1, 1, Init::Gaussian(0.01), rng),
                    reg: Conv2d::new(&format!("ssd.{s}.reg"), c, b * 4, 3, 1, 1, Init::Gaussian(0.01), rng),
                    boxes_per_cell: b,
                    hw: (0, 0),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            num_classes,
            aux,
            heads,
            backbone_taps: backbone.taps.clone(),
        })
    }

    /// Runs the auxiliary chain on top of the backbone taps and returns every
    /// named volume (taps plus auxiliary outputs).
    pub fn sources(&mut self, taps: &Taps) -> Taps {
        let mut all = taps.clone();
        for layer in &mut self.aux {
            let x = &all[&layer.spec().input];
            let y = layer.forward(x);
            all.insert(layer.spec().output.clone(), y);
        }
        all
    }

    /// Applies the per-source prediction convolutions. `expected_boxes` is the
    /// default-box count the predictions must align with.
    pub fn multibox_forward(&mut self, volumes: &Taps, expected_boxes: usize) -> Result<MultiboxOutput> {
        let k = self.num_classes + 1;
        let total: usize = self
            .config
            .sources
            .iter()
            .zip(&self.heads)
            .map(|(s, h)| volumes.get(s).map_or(0, |v| v.plane()) * h.boxes_per_cell)
            .sum();
        if total != expected_boxes {
            return Err(Error::Config(format!(
                "multibox heads emit {total} predictions but {expected_boxes} default boxes were generated"
            )));
        }
        let mut logits = Matrix::zeros(total, k);
        let mut deltas = Vec::with_capacity(total);
        let mut row = 0;
        for (s, head) in self.config.sources.iter().zip(&mut self.heads) {
            let v = &volumes[s];
            let cls = head.cls.forward(v);
            let reg = head.reg.forward(v);
            head.hw = (v.height, v.width);
            let plane = v.plane();
            for cell in 0..plane {
                for b in 0..head.boxes_per_cell {
                    let out = logits.row_mut(row);
                    for c in 0..k {
                        out[c] = cls.data[(b * k + c) * plane + cell];
                    }
                    let d = |j: usize| reg.data[(b * 4 + j) * plane + cell];
                    deltas.push(BoxDelta::new(d(0), d(1), d(2), d(3)));
                    row += 1;
                }
            }
        }
        Ok(MultiboxOutput { logits, deltas })
    }

    /// Full forward from backbone taps to aligned predictions.
    pub fn forward(&mut self, taps: &Taps, expected_boxes: usize) -> Result<MultiboxOutput> {
        let volumes = self.sources(taps);
        self.multibox_forward(&volumes, expected_boxes)
    }

    /// Back-propagates prediction gradients through heads and auxiliary
    /// layers; returns gradients for the backbone taps.
    pub fn backward(&mut self, d_logits: &Matrix, d_deltas: &[[f64; 4]]) -> Taps {
        let k = self.num_classes + 1;
        let mut grads: Taps = Taps::new();
        let mut row = 0;
        for (s, head) in self.config.sources.iter().zip(&mut self.heads) {
            let (h, w) = head.hw;
            let plane = h * w;
            let b_n = head.boxes_per_cell;
            let mut d_cls = Volume::zeros(b_n * k, h, w);
            let mut d_reg = Volume::zeros(b_n * 4, h, w);
            for cell in 0..plane {
                for b in 0..b_n {
                    let g = d_logits.row(row);
                    for c in 0..k {
                        d_cls.data[(b * k + c) * plane + cell] = g[c];
                    }
                    for j in 0..4 {
                        d_reg.data[(b * 4 + j) * plane + cell] = d_deltas[row][j];
                    }
                    row += 1;
                }
            }
            let mut dv = head.cls.backward(&d_cls);
            dv.add_assign(&head.reg.backward(&d_reg));
            accumulate(&mut grads, s, dv);
        }
        for layer in self.aux.iter_mut().rev() {
            let out = layer.spec().output.clone();
            if let Some(g) = grads.remove(&out) {
                let dx = layer.backward(&g);
                accumulate(&mut grads, &layer.spec().input.clone(), dx);
            }
        }
        grads.retain(|name, _| self.backbone_taps.contains(name));
        grads
    }
}

fn accumulate(grads: &mut Taps, name: &str, g: Volume) {
    match grads.get_mut(name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

impl Module for SsdNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for layer in &self.aux {
            if let AuxLayer::Conv { reduce, conv, .. } = layer {
                v.extend(reduce.params());
                v.extend(conv.params());
            }
        }
        for h in &self.heads {
            v.extend(h.cls.params());
            v.extend(h.reg.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for layer in &mut self.aux {
            if let AuxLayer::Conv { reduce, conv, .. } = layer {
                v.extend(reduce.params_mut());
                v.extend(conv.params_mut());
            }
        }
        for h in &mut self.heads {
            v.extend(h.cls.params_mut());
            v.extend(h.reg.params_mut());
        }
        v
    }
}
