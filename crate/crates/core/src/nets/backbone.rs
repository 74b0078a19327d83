//! Shallow convolutional backbone with named feature taps.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Init, Module, Param, Relu};
use super::tensor::Volume;
use crate::error::{Error, Result};
use crate::priors::FeatureMapSpec;

/// Named feature volumes produced by a forward pass.
pub type Taps = BTreeMap<String, Volume>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub channels: usize,
    /// 1 or 2; applied by the first conv of the stage.
    pub stride: usize,
    /// Number of 3×3 conv + ReLU pairs.
    #[serde(default = "one")]
    pub convs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "three")]
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Stage names exposed as feature taps, bottom to top.
    pub taps: Vec<String>,
}

fn three() -> usize {
    3
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone has no stages".into()));
        }
        for s in &self.stages {
            if !(s.stride == 1 || s.stride == 2) || s.channels == 0 || s.convs == 0 {
                return Err(Error::Config(format!(
                    "stage `{}` needs stride 1 or 2 and positive channels/convs",
                    s.name
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.stages {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate stage name `{}`", s.name)));
            }
        }
        let mut last = None;
        for t in &self.taps {
            let pos = self.stage_index(t).ok_or_else(|| {
                Error::Config(format!("tap `{t}` does not name a backbone stage"))
            })?;
            if last.is_some_and(|l| pos <= l) {
                return Err(Error::Config("taps must be unique and ordered bottom to top".into()));
            }
            last = Some(pos);
        }
        Ok(())
    }

    fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    /// Cumulative stride at the output of a stage.
    pub fn stride_of(&self, name: &str) -> Option<usize> {
        let idx = self.stage_index(name)?;
        Some(self.stages[..=idx].iter().map(|s| s.stride).product())
    }

    pub fn channels_of(&self, name: &str) -> Option<usize> {
        self.stage_index(name).map(|i| self.stages[i].channels)
    }

    pub fn max_tap_stride(&self) -> usize {
        self.taps
            .iter()
            .filter_map(|t| self.stride_of(t))
            .max()
            .unwrap_or(1)
    }

    /// Feature-map geometry of every tap for an input of the given size.
    pub fn tap_specs(&self, height: usize, width: usize) -> Vec<FeatureMapSpec> {
        self.taps
            .iter()
            .map(|t| {
                let stride = self.stride_of(t).expect("validated tap");
                FeatureMapSpec {
                    name: t.clone(),
                    stride,
                    height: height.div_ceil(stride),
                    width: width.div_ceil(stride),
                    channels: self.channels_of(t).expect("validated tap"),
                }
            })
            .collect()
    }

    pub fn tap_spec(&self, tap: &str, height: usize, width: usize) -> Option<FeatureMapSpec> {
        self.tap_specs(height, width).into_iter().find(|s| s.name == tap)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    name: String,
    convs: Vec<(Conv2d, Relu)>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.in_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for s in &config.stages {
            let mut convs = Vec::with_capacity(s.convs);
            for i in 0..s.convs {
                let stride = if i == 0 { s.stride } else { 1 };
                let name = format!("backbone.{}.{}", s.name, i);
                convs.push((
                    Conv2d::new(&name, in_c, s.channels, 3, stride, 1, Init::He, rng),
                    Relu::default(),
                ));
                in_c = s.channels;
            }
            stages.push(Stage {
                name: s.name.clone(),
                convs,
            });
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    fn top_tap_index(&self) -> usize {
        self.config
            .taps
            .iter()
            .filter_map(|t| self.config.stage_index(t))
            .max()
            .unwrap_or(self.stages.len() - 1)
    }

    /// Runs the stages up to the highest tap. Tap dims are `ceil(input / stride)`.
    pub fn forward(&mut self, image: &Volume) -> Taps {
        let top = self.top_tap_index();
        let mut taps = Taps::new();
        let mut x = image.clone();
        for stage in self.stages.iter_mut().take(top + 1) {
            for (conv, relu) in &mut stage.convs {
                x = conv.forward(&x);
                relu.forward_in_place(&mut x.data);
            }
            if self.config.taps.iter().any(|t| *t == stage.name) {
                taps.insert(stage.name.clone(), x.clone());
            }
        }
        taps
    }

    /// Back-propagates tap gradients (any subset of taps). Returns the image gradient.
    pub fn backward(&mut self, grads: &Taps) -> Option<Volume> {
        let top = self.top_tap_index();
        let mut g: Option<Volume> = None;
        for stage in self.stages[..=top].iter_mut().rev() {
            if let Some(tg) = grads.get(&stage.name) {
                match &mut g {
                    Some(acc) => acc.add_assign(tg),
                    None => g = Some(tg.clone()),
                }
            }
            if let Some(mut cur) = g.take() {
                for (conv, relu) in stage.convs.iter_mut().rev() {
                    relu.backward_in_place(&mut cur.data);
                    cur = conv.backward(&cur);
                }
                g = Some(cur);
            }
        }
        g
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<&Param> {
        self.stages
            .iter()
            .flat_map(|s| s.convs.iter().flat_map(|(c, _)| c.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.convs.iter_mut().flat_map(|(c, _)| c.params_mut()))
            .collect()
    }
}

/// Zero-pads an image on the bottom/right so both sides divide `stride`.
/// Returns the padded volume and the number of rows and columns added.
pub fn pad_to_stride(image: &Volume, stride: usize) -> (Volume, (usize, usize)) {
    let h = image.height.div_ceil(stride) * stride;
    let w = image.width.div_ceil(stride) * stride;
    if h == image.height && w == image.width {
        return (image.clone(), (0, 0));
    }
    (image.pad_to(h, w), (h - image.height, w - image.width))
}
