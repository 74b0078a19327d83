//! Losses, optimizer, augmentation and the end-to-end training loops.

pub mod augment;
pub mod loss;
pub mod sgd;

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::detector::frcnn::StepOptions;
use crate::detector::ssd::resize_sample;
use crate::detector::{pixel_mean, preprocess, Model, Sample, StepLoss};
use crate::error::{Error, Result};
use crate::nets::checkpoint::Checkpoint;
use crate::nets::layers::Module;

pub use augment::{augment, flip_sample, AugmentFlags};
pub use loss::{multitask_loss, smooth_l1, LossOutput};
pub use sgd::{lr_at, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_gamma: f64,
    /// Iterations at which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<u64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: u64,
    #[serde(default = "one")]
    pub images_per_step: usize,
    /// Weight λ of the regression terms.
    #[serde(default = "one_f")]
    pub loss_balance: f64,
    #[serde(default)]
    pub augment: AugmentFlags,
    /// Rescales the global gradient norm down to this value when exceeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            lr_gamma: 0.1,
            lr_steps: vec![50_000],
            momentum: 0.9,
            weight_decay: 0.0005,
            max_iters: 70_000,
            images_per_step: 1,
            loss_balance: 1.0,
            augment: AugmentFlags::default(),
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Schedule shrunk for minutes-scale runs on a CPU.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.01,
            lr_steps: vec![1_500],
            max_iters: 2_000,
            clip_grad_norm: Some(10.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma < 1.0) {
            return Err(Error::Config(format!("lr_gamma must lie in (0,1), got {}", self.lr_gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.images_per_step == 0 {
            return Err(Error::Config("images_per_step must be positive".into()));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: StepLoss,
    pub wall_seconds: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Append-only per-iteration log, persisted as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss.total).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Separate random streams so that changing one consumer (e.g. turning on
/// augmentation) does not perturb parameter initialization.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let make = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    (make(0), make(1), make(2))
}

fn clip_gradients<M: Module + ?Sized>(model: &mut M, max_norm: f64) {
    let norm = model
        .params()
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for p in model.params_mut() {
            for g in &mut p.grad {
                *g *= k;
            }
        }
    }
}

/// Trains either detector family, chosen by `cfg.detector`.
pub fn train(cfg: &ExperimentConfig, data: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let (mut init_rng, mut order_rng, mut step_rng) = streams(cfg.seed);
    let mut model = cfg.build_model(&mut init_rng)?;
    let data: Vec<Sample> = match &model {
        Model::Ssd(m) => {
            let size = m.config.input_size;
            data.iter()
                .map(|s| {
                    let (image, gts) = resize_sample(&s.image, &s.gts, size);
                    Sample { id: s.id.clone(), image, gts }
                })
                .collect()
        }
        Model::Frcnn(_) => data.to_vec(),
    };
    let mean = pixel_mean(data.iter().map(|s| &s.image));
    let config_value = serde_json::to_value(cfg)?;
    let hash = cfg.hash();
    let opts = StepOptions {
        assign: cfg.assignment,
        ohem: cfg.ohem,
        lambda: cfg.train.loss_balance,
    };
    let tc = &cfg.train;
    let mut sgd = Sgd::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut last_good = Checkpoint::capture(&model, config_value.clone(), mean, 0);
    let start = Instant::now();

    for iter in 0..tc.max_iters {
        model.zero_grad();
        let mut step = StepLoss::default();
        let weight = 1.0 / tc.images_per_step as f64;
        for _ in 0..tc.images_per_step {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let sample = &data[order.pop().expect("refilled")];
            let (image, gts) = augment(&sample.image, &sample.gts, tc.augment, &mut step_rng);
            let x = preprocess(&image, mean);
            let l = match &mut model {
                Model::Frcnn(m) => m.train_step(&x, &gts, &opts, &mut step_rng, None)?,
                Model::Ssd(m) => m.train_step(&x, &gts, &opts.assign, opts.lambda)?,
            };
            step.accumulate(&l, weight);
        }
        if !step.total.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                loss: step.total,
                last_good: Box::new(last_good),
            });
        }
        if tc.images_per_step > 1 {
            for p in model.params_mut() {
                for g in &mut p.grad {
                    *g *= weight;
                }
            }
        }
        if let Some(max) = tc.clip_grad_norm {
            clip_gradients(&mut model, max);
        }
        sgd.step(model.params_mut(), tc, iter)?;
        log.push(LogRecord {
            iteration: iter,
            lr: lr_at(tc, iter),
            loss: step,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
            config_hash: hash.clone(),
        });
        if (iter + 1) % 100 == 0 {
            last_good = Checkpoint::capture(&model, config_value.clone(), mean, iter + 1);
        }
        if (iter + 1) % 250 == 0 {
            log::info!("iter {} loss {:.4} lr {:.2e}", iter + 1, step.total, lr_at(tc, iter));
        }
    }
    let checkpoint = Checkpoint::capture(&model, config_value, mean, tc.max_iters);
    Ok(TrainOutcome { model, checkpoint, log })
}

/// End-to-end training of the Faster R-CNN family (plain, multi-scale, OHEM).
pub fn train_frcnn(cfg: &ExperimentConfig, data: &[Sample]) -> Result<TrainOutcome> {
    if cfg.detector.is_ssd() {
        return Err(Error::Config(format!("train_frcnn called with detector {:?}", cfg.detector)));
    }
    train(cfg, data)
}

/// Training of SSD and trimmed SSD.
pub fn train_ssd(cfg: &ExperimentConfig, data: &[Sample]) -> Result<TrainOutcome> {
    if !cfg.detector.is_ssd() {
        return Err(Error::Config(format!("train_ssd called with detector {:?}", cfg.detector)));
    }
    train(cfg, data)
}

/// Rebuilds a model from a checkpoint, returning it with its pixel mean.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Model)> {
    let cfg: ExperimentConfig = serde_json::from_value(ckpt.config.clone())?;
    let (mut init_rng, _, _) = streams(cfg.seed);
    let mut model = cfg.build_model(&mut init_rng)?;
    ckpt.restore(&mut model)?;
    Ok((cfg, model))
}
