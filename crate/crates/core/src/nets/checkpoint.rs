//! JSON parameter store keyed by parameter name.
//!
//! ```json
//! {
//!   "version": 1,
//!   "iteration": 2000,
//!   "config": { ... },
//!   "pixel_mean": [0.71, 0.66, 0.69],
//!   "params": { "rpn.conv.weight": { "shape": [32, 48, 3, 3], "data": [...] } }
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Module;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    /// The experiment configuration the parameters belong to.
    pub config: serde_json::Value,
    pub pixel_mean: [f64; 3],
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn capture<M: Module + ?Sized>(
        model: &M,
        config: serde_json::Value,
        pixel_mean: [f64; 3],
        iteration: u64,
    ) -> Self {
        let params = model
            .params()
            .into_iter()
            .map(|p| {
                (
                    p.name.clone(),
                    StoredTensor {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            iteration,
            config,
            pixel_mean,
            params,
        }
    }

    /// Copies stored values into `model`. Every model parameter must be
    /// present with a matching shape.
    pub fn restore<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        for p in model.params_mut() {
            let stored = self
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if stored.shape != p.shape || stored.data.len() != p.value.len() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name, stored.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&stored.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}
