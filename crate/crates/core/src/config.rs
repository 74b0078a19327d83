//! Experiment configuration files and ablation matrices.
//!
//! Configs are JSON with a schema version; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{FasterRcnn, FrcnnConfig, FrcnnVariant, InferenceConfig, Model, Ssd, SsdConfig};
use crate::error::{Error, Result};
use crate::nets::backbone::{BackboneConfig, StageConfig};
use crate::nets::rpn::ProposalConfig;
use crate::nets::ssd::{trim_ssd, SsdHeadConfig};
use crate::priors::AnchorSpec;
use crate::sampling::{AssignmentConfig, OhemConfig};
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Frcnn,
    MsFrcnn,
    OhemFrcnn,
    Ssd,
    TrimmedSsd,
}

impl DetectorKind {
    pub fn is_ssd(self) -> bool {
        matches!(self, DetectorKind::Ssd | DetectorKind::TrimmedSsd)
    }

    pub fn frcnn_variant(self) -> Option<FrcnnVariant> {
        match self {
            DetectorKind::Frcnn => Some(FrcnnVariant::Plain),
            DetectorKind::MsFrcnn => Some(FrcnnVariant::MultiScale),
            DetectorKind::OhemFrcnn => Some(FrcnnVariant::Ohem),
            _ => None,
        }
    }
}

fn seven() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub detector: DetectorKind,
    #[serde(default = "seven")]
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frcnn: Option<FrcnnConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssd: Option<SsdConfig>,
    /// Auxiliary SSD layers removed for `trimmed-ssd`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trim: Vec<String>,
    #[serde(default)]
    pub assignment: AssignmentConfig,
    #[serde(default)]
    pub ohem: OhemConfig,
    pub train: TrainConfig,
    /// Dataset directory (holding `annotations.json`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Seeds parameter init, data order, sampling and augmentation.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.train.validate()?;
        self.assignment.validate()?;
        if let Some(v) = self.detector.frcnn_variant() {
            let f = self
                .frcnn
                .as_ref()
                .ok_or_else(|| Error::Config(format!("detector `{:?}` needs an `frcnn` section", self.detector)))?;
            f.validate(v)?;
            if v == FrcnnVariant::Ohem {
                self.ohem.validate()?;
            }
        } else {
            if self.ssd.is_none() {
                return Err(Error::Config("SSD detectors need an `ssd` section".into()));
            }
            if self.detector == DetectorKind::TrimmedSsd && self.trim.is_empty() {
                return Err(Error::Config("trimmed-ssd needs a non-empty `trim` list".into()));
            }
            self.ssd_config()?.expect("checked").default_box_spec()?;
        }
        Ok(())
    }

    /// The SSD configuration with the trim applied (for `trimmed-ssd`).
    pub fn ssd_config(&self) -> Result<Option<SsdConfig>> {
        let Some(ssd) = &self.ssd else { return Ok(None) };
        let mut ssd = ssd.clone();
        if self.detector == DetectorKind::TrimmedSsd {
            let removed: BTreeSet<String> = self.trim.iter().cloned().collect();
            ssd.head = trim_ssd(&ssd.head, &removed)?;
        }
        Ok(Some(ssd))
    }

    pub fn build_model<R: Rng>(&self, rng: &mut R) -> Result<Model> {
        self.validate()?;
        Ok(match self.detector.frcnn_variant() {
            Some(v) => Model::Frcnn(FasterRcnn::new(
                self.frcnn.as_ref().expect("validated"),
                v,
                self.num_classes,
                rng,
            )?),
            None => Model::Ssd(Ssd::new(&self.ssd_config()?.expect("validated"), self.num_classes, rng)?),
        })
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Small Faster R-CNN family preset for 128×128 synthetic scenes.
    pub fn desk_frcnn(kind: DetectorKind) -> Self {
        let backbone = BackboneConfig {
            in_channels: 3,
            stages: vec![
                StageConfig { name: "conv1".into(), channels: 16, stride: 2, convs: 1 },
                StageConfig { name: "conv2".into(), channels: 32, stride: 2, convs: 1 },
                StageConfig { name: "conv3".into(), channels: 48, stride: 2, convs: 2 },
            ],
            taps: vec!["conv1".into(), "conv2".into(), "conv3".into()],
        };
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: String::new(),
            detector: kind,
            num_classes: 7,
            frcnn: Some(FrcnnConfig {
                backbone,
                rpn_tap: "conv3".into(),
                anchors: AnchorSpec {
                    scales: vec![16.0, 32.0, 64.0],
                    ratios: vec![2.0, 1.0, 0.5],
                },
                rpn_channels: 48,
                pool_size: 4,
                hidden: 128,
                fusion_taps: vec!["conv1".into(), "conv2".into(), "conv3".into()],
                fusion_scale_init: 1.0,
                train_proposals: ProposalConfig {
                    pre_nms_top_n: 600,
                    nms_threshold: 0.7,
                    post_nms_top_n: 128,
                },
                test_proposals: ProposalConfig {
                    pre_nms_top_n: 600,
                    nms_threshold: 0.7,
                    post_nms_top_n: 100,
                },
                bbox_stds: [0.1, 0.1, 0.2, 0.2],
                inference: InferenceConfig::frcnn_default(),
            }),
            ssd: None,
            trim: Vec::new(),
            assignment: AssignmentConfig {
                roi_bg_range: [0.0, 0.5],
                rpn_batch: 128,
                roi_batch: 64,
                ..AssignmentConfig::default()
            },
            ohem: OhemConfig {
                batch_size: 64,
                dedup_iou: 0.7,
            },
            train: TrainConfig::desk(),
            dataset: None,
            seed: 0,
        }
    }

    /// Small SSD preset for 128×128 synthetic scenes; `trimmed-ssd` drops
    /// the conv7..conv9 auxiliary layers.
    pub fn desk_ssd(kind: DetectorKind) -> Self {
        let backbone = BackboneConfig {
            in_channels: 3,
            stages: vec![
                StageConfig { name: "conv1".into(), channels: 16, stride: 2, convs: 1 },
                StageConfig { name: "conv2".into(), channels: 32, stride: 2, convs: 1 },
                StageConfig { name: "conv4_3".into(), channels: 48, stride: 2, convs: 2 },
                StageConfig { name: "fc7".into(), channels: 64, stride: 2, convs: 1 },
            ],
            taps: vec!["conv4_3".into(), "fc7".into()],
        };
        let trim = if kind == DetectorKind::TrimmedSsd {
            vec!["conv7".into(), "conv8".into(), "conv9".into()]
        } else {
            Vec::new()
        };
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: String::new(),
            detector: kind,
            num_classes: 7,
            frcnn: None,
            ssd: Some(SsdConfig {
                backbone,
                head: SsdHeadConfig::seven_source("conv4_3", "fc7", [64, 32, 32, 32]),
                input_size: 128,
                s_min: 0.2,
                s_max: 0.9,
                bbox_stds: [0.1, 0.1, 0.2, 0.2],
                inference: InferenceConfig::ssd_default(),
            }),
            trim,
            assignment: AssignmentConfig::default(),
            ohem: OhemConfig::default(),
            train: TrainConfig::desk(),
            dataset: None,
            seed: 0,
        }
    }
}

/// A base config plus named JSON merge patches, crossed with seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub schema_version: u32,
    pub base: ExperimentConfig,
    pub rows: Vec<MatrixRow>,
    /// Seeds each row runs with; empty means the base seed only.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRow {
    pub name: String,
    /// Merge patch applied to the base config's JSON form.
    #[serde(default)]
    pub patch: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub row: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl AblationMatrix {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
        })?;
        if m.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: m.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        m.cells()?;
        Ok(m)
    }

    /// Expands every row × seed into a validated config.
    pub fn cells(&self) -> Result<Vec<MatrixCell>> {
        let base = serde_json::to_value(&self.base)?;
        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::new();
        for row in &self.rows {
            let mut v = base.clone();
            json_patch::merge(&mut v, &row.patch);
            let mut cfg: ExperimentConfig = serde_json::from_value(v)
                .map_err(|e| Error::Config(format!("row `{}`: {e}", row.name)))?;
            cfg.name = row.name.clone();
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.seed = seed;
                c.validate()
                    .map_err(|e| Error::Config(format!("row `{}`: {e}", row.name)))?;
                out.push(MatrixCell {
                    row: row.name.clone(),
                    seed,
                    config: c,
                });
            }
        }
        Ok(out)
    }
}
