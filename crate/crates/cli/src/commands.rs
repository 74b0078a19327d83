use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sediment::boxes::{BBox, Detection};
use sediment::config::{AblationMatrix, ExperimentConfig};
use sediment::detector::{preprocess, Model, Sample};
use sediment::eval::{
    evaluate, plot_lines, proposal_recall, recall_vs_iou, render_overlays, EvalReport, Palette, RecallCurve, Series,
};
use sediment::nets::{Checkpoint, ProposalConfig};
use sediment::synth::{
    build_dataset, load_dataset, load_samples, DatasetManifest, SceneSpec, Split, Splits, MANIFEST_FILE,
};
use sediment::trainer::{load_model, train as fit};
use sediment::Error;

use crate::{AnalyzeMode, Preset, SplitArg};

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidGroundTruth(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::InvalidTrim(_)
            | Error::SchemaVersion { .. }
            | Error::UnknownClass(_)
            | Error::Split(_)
            | Error::Json(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::validation(format!("{what} `{}` does not exist", path.display())))
    }
}

fn mkdir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

/// Splits a dataset directory, seeding the shuffle with the seed it was
/// synthesized with so that every command sees the same partition.
fn splits(dir: &Path) -> Outcome<Splits> {
    require(dir, "dataset")?;
    let manifest = dir.join(MANIFEST_FILE);
    let seed = if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::Io {
            path: manifest.clone(),
            source: e,
        })?;
        serde_json::from_str::<DatasetManifest>(&text).map_err(Error::from)?.seed
    } else {
        0
    };
    Ok(load_dataset(dir, seed)?)
}

fn split_samples(dir: &Path, split: SplitArg) -> Outcome<Vec<Sample>> {
    let s = splits(dir)?;
    Ok(load_samples(s.get(split_of(split)), dir)?)
}

pub fn synth(out_root: &Path, spec: Option<&Path>, preset: Preset, n: usize, seed: u64, out: Option<PathBuf>) -> Outcome {
    let spec = match spec {
        Some(p) => {
            require(p, "scene spec")?;
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<SceneSpec>(&text).map_err(|e| {
                Failure::validation(format!("{}: line {} column {}: {e}", p.display(), e.line(), e.column()))
            })?
        }
        None => match preset {
            Preset::Easy => SceneSpec::easy(),
            Preset::Standard => SceneSpec::standard(),
        },
    };
    spec.validate()?;
    let dir = out.unwrap_or_else(|| {
        let h = short_hash(&serde_json::to_vec(&spec).expect("spec serializes"));
        out_root.join("datasets").join(format!("{h}-{n}-{seed}"))
    });
    let manifest = build_dataset(&spec, n, seed, &dir)?;
    info!("wrote {} images to {}", manifest.n_images, dir.display());
    println!("{}", dir.display());
    Ok(())
}

fn run_dir(out_root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out_root.join(cfg.hash())
}

/// Trains `cfg` and writes `config.json`, `checkpoint.json` and
/// `train_log.jsonl` into its run directory.
fn train_config(out_root: &Path, cfg: &ExperimentConfig) -> Outcome<PathBuf> {
    let data_dir = cfg
        .dataset
        .clone()
        .ok_or_else(|| Failure::validation("config has no `dataset` and none was given"))?;
    let samples = load_samples(&splits(&data_dir)?.train, &data_dir)?;
    let dir = run_dir(out_root, cfg);
    mkdir(&dir)?;
    write(&dir.join("config.json"), cfg.to_json_pretty())?;
    info!("training `{}` ({}) on {} images", cfg.name, cfg.hash(), samples.len());
    match fit(cfg, &samples) {
        Ok(outcome) => {
            outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
            outcome.log.write_jsonl(&dir.join("train_log.jsonl"))?;
            Ok(dir)
        }
        Err(Error::Diverged {
            iteration,
            loss,
            last_good,
        }) => {
            last_good.save(&dir.join("checkpoint-last-good.json"))?;
            Err(Failure {
                code: EXIT_RUNTIME,
                message: format!("training diverged at iteration {iteration} (loss {loss}); last good checkpoint saved"),
            })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train(out_root: &Path, config: &Path, dataset: Option<&Path>) -> Outcome<PathBuf> {
    require(config, "config")?;
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(d) = dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    let dir = train_config(out_root, &cfg)?;
    println!("{}", dir.display());
    Ok(dir)
}

fn load_checkpoint(path: &Path) -> Outcome<(ExperimentConfig, Model, [f64; 3])> {
    require(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let (cfg, model) = load_model(&ckpt)?;
    Ok((cfg, model, ckpt.pixel_mean))
}

#[derive(Serialize)]
struct ImageDetections<'a> {
    id: &'a str,
    detections: &'a [Detection],
}

fn dataset_id(dir: &Path) -> String {
    dir.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn write_report(dir: &Path, tag: &str, report: &EvalReport, samples: &[Sample], dets: &[Vec<Detection>]) -> Outcome {
    report.save(&dir.join(format!("eval-{tag}.json")))?;
    write(&dir.join(format!("eval-{tag}.csv")), report.to_csv())?;
    write(&dir.join(format!("pr-{tag}.csv")), report.pr_csv())?;
    let per_image: Vec<ImageDetections> = samples
        .iter()
        .zip(dets)
        .map(|(s, d)| ImageDetections { id: &s.id, detections: d })
        .collect();
    write(
        &dir.join(format!("detections-{tag}.json")),
        serde_json::to_vec_pretty(&per_image).map_err(Error::from)?,
    )
}

fn split_tag(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

pub fn eval(out_root: &Path, checkpoint: &Path, dataset: &Path, split: SplitArg) -> Outcome {
    let (cfg, mut model, mean) = load_checkpoint(checkpoint)?;
    let samples = split_samples(dataset, split)?;
    let name = if cfg.name.is_empty() { cfg.hash() } else { cfg.name.clone() };
    let (report, dets) = evaluate(&name, &mut model, &samples, mean, &cfg.hash(), &dataset_id(dataset))?;
    let dir = run_dir(out_root, &cfg);
    mkdir(&dir)?;
    write_report(&dir, split_tag(split), &report, &samples, &dets)?;
    print!("{}", report.to_csv());
    Ok(())
}

const PALETTE: [[u8; 3]; 6] = [[220, 40, 40], [40, 90, 220], [30, 150, 60], [200, 120, 0], [140, 50, 170], [0, 150, 160]];

fn proposals_for(model: &mut Model, mean: [f64; 3], samples: &[Sample], n: usize) -> Outcome<Vec<Vec<BBox>>> {
    let Model::Frcnn(m) = model else {
        return Err(Failure::validation("proposal analyses need a Faster R-CNN family checkpoint"));
    };
    let cfg = ProposalConfig {
        pre_nms_top_n: m.config.test_proposals.pre_nms_top_n.max(n),
        nms_threshold: m.config.test_proposals.nms_threshold,
        post_nms_top_n: n,
    };
    samples
        .iter()
        .map(|s| Ok(m.proposals(&preprocess(&s.image, mean), &cfg)?.into_iter().map(|p| p.bbox).collect()))
        .collect()
}

pub fn analyze(
    out_root: &Path,
    checkpoints: &[PathBuf],
    dataset: &Path,
    split: SplitArg,
    mode: AnalyzeMode,
    proposals: usize,
) -> Outcome {
    if proposals == 0 {
        return Err(Failure::validation("--proposals must be positive"));
    }
    let samples = split_samples(dataset, split)?;
    let gts: Vec<Vec<BBox>> = samples.iter().map(|s| s.gts.iter().map(|g| g.bbox).collect()).collect();
    let tag = match mode {
        AnalyzeMode::ProposalRecall => "proposal-recall",
        AnalyzeMode::RecallVsIou => "recall-vs-iou",
        AnalyzeMode::PrCurves => "pr-curves",
    };
    let mut series = Vec::new();
    let mut hashes = Vec::new();
    for (k, path) in checkpoints.iter().enumerate() {
        let (cfg, mut model, mean) = load_checkpoint(path)?;
        let hash = cfg.hash();
        let label = if cfg.name.is_empty() { hash.clone() } else { cfg.name.clone() };
        let dir = run_dir(out_root, &cfg).join("analysis");
        mkdir(&dir)?;
        let color = PALETTE[k % PALETTE.len()];
        match mode {
            AnalyzeMode::ProposalRecall | AnalyzeMode::RecallVsIou => {
                let props = proposals_for(&mut model, mean, &samples, proposals)?;
                let curve: RecallCurve = if mode == AnalyzeMode::ProposalRecall {
                    proposal_recall(&props, &gts, proposals, 0.5)
                } else {
                    let ts: Vec<f64> = (10..=20).map(|i| i as f64 * 0.05).collect();
                    recall_vs_iou(&props, &gts, proposals, &ts)
                };
                write(&dir.join(format!("{tag}-{}.csv", split_tag(split))), curve.to_csv())?;
                series.push(Series { label, color, points: curve.points });
            }
            AnalyzeMode::PrCurves => {
                let (report, _) = evaluate(&label, &mut model, &samples, mean, &hash, &dataset_id(dataset))?;
                write(&dir.join(format!("{tag}-{}.csv", split_tag(split))), report.pr_csv())?;
                for (c, curve) in report.pr_curves.iter().enumerate() {
                    let points = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
                    series.push(Series {
                        label: format!("{label}/{}", curve.class),
                        color: Palette::default().colors.get(c).copied().unwrap_or(color),
                        points,
                    });
                }
            }
        }
        hashes.push(hash);
    }
    let (x_range, y_range) = match mode {
        AnalyzeMode::ProposalRecall => (Some((1.0, proposals as f64)), Some((0.0, 1.0))),
        _ => (Some((if mode == AnalyzeMode::PrCurves { 0.0 } else { 0.5 }, 1.0)), Some((0.0, 1.0))),
    };
    let img = plot_lines(&series, 640, 480, x_range, y_range);
    let dir = out_root.join("analysis").join(short_hash(hashes.join(",").as_bytes()));
    mkdir(&dir)?;
    let png = dir.join(format!("{tag}-{}.png", split_tag(split)));
    img.save(&png).map_err(Error::from)?;
    let legend: Vec<String> = series
        .iter()
        .map(|s| format!("{},{},{},{}", s.label, s.color[0], s.color[1], s.color[2]))
        .collect();
    write(&dir.join(format!("{tag}-{}-legend.csv", split_tag(split))), format!("label,r,g,b\n{}\n", legend.join("\n")))?;
    println!("{}", png.display());
    Ok(())
}

pub fn render(
    out_root: &Path,
    checkpoint: &Path,
    images: &[PathBuf],
    dataset: Option<&Path>,
    split: SplitArg,
    threshold: f64,
) -> Outcome {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::validation(format!("threshold must lie in [0,1], got {threshold}")));
    }
    let (cfg, mut model, mean) = load_checkpoint(checkpoint)?;
    let inputs: Vec<(String, image::RgbImage)> = match dataset {
        Some(d) => split_samples(d, split)?.into_iter().map(|s| (s.id, s.image)).collect(),
        None => {
            if images.is_empty() {
                return Err(Failure::validation("give --images or --dataset"));
            }
            images
                .iter()
                .map(|p| {
                    require(p, "image")?;
                    let img = image::open(p).map_err(Error::from)?.to_rgb8();
                    let stem = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
                    Ok((stem, img))
                })
                .collect::<Outcome<_>>()?
        }
    };
    let dir = run_dir(out_root, &cfg).join("overlays");
    mkdir(&dir)?;
    let palette = Palette::default();
    for (id, img) in &inputs {
        let dets = model.detect(img, mean)?;
        let drawn = render_overlays(img, &dets, threshold, &palette)?;
        drawn.save(dir.join(format!("{id}.png"))).map_err(Error::from)?;
    }
    info!("drew {} overlays", inputs.len());
    println!("{}", dir.display());
    Ok(())
}

pub fn matrix(out_root: &Path, path: &Path, dataset: Option<&Path>) -> Outcome {
    require(path, "matrix")?;
    let mut m = AblationMatrix::load(path)?;
    if let Some(d) = dataset {
        m.base.dataset = Some(d.to_path_buf());
    }
    let cells = m.cells()?;
    let many_seeds = m.seeds.len() > 1;
    let mut table = String::new();
    for cell in &cells {
        let dir = train_config(out_root, &cell.config)?;
        let data_dir = cell.config.dataset.clone().expect("checked by train_config");
        let samples = split_samples(&data_dir, SplitArg::Test)?;
        let (_, mut model, mean) = load_checkpoint(&dir.join("checkpoint.json"))?;
        let name = if many_seeds {
            format!("{}/s{}", cell.row, cell.seed)
        } else {
            cell.row.clone()
        };
        let (report, dets) = evaluate(&name, &mut model, &samples, mean, &cell.config.hash(), &dataset_id(&data_dir))?;
        write_report(&dir, "test", &report, &samples, &dets)?;
        if report.map.is_none() {
            warn!("{name}: no ground truth in the test split");
        }
        if table.is_empty() {
            table = format!("{},config_hash\n", report.csv_header());
        }
        table.push_str(&format!("{},{}\n", report.csv_row(), cell.config.hash()));
    }
    let dir = out_root.join(format!("matrix-{}", short_hash(&serde_json::to_vec(&m).map_err(Error::from)?)));
    mkdir(&dir)?;
    write(&dir.join("table.csv"), &table)?;
    print!("{table}");
    Ok(())
}
