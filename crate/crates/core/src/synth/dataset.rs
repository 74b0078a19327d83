use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{generate_scene, image_seed};
use super::{Magnification, ParticleClass, SceneSpec};
use crate::boxes::{BBox, GroundTruth};
use crate::detector::Sample;
use crate::error::{Error, Result};

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    pub class: ParticleClass,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    /// Image path relative to the annotation file.
    pub file: String,
    pub magnification: Magnification,
    pub objects: Vec<ObjectAnnotation>,
}

impl AnnotationRecord {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .filter_map(|o| o.class.class_id().map(|class_id| GroundTruth { bbox: o.bbox, class_id }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub images: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub n_images: usize,
    pub annotations: ManifestEntry,
    pub images: Vec<ManifestEntry>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Renders `n_images` scenes into `out_dir/images/`, writes the annotation
/// file and a manifest of content hashes. Image `i` depends only on
/// `(seed, i)`.
pub fn build_dataset(spec: &SceneSpec, n_images: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(n_images);
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let scene = generate_scene(spec, image_seed(seed, i as u64))?;
        let id = format!("{i:06}");
        let file = format!("images/{id}.png");
        let bytes = png_bytes(&scene.image)?;
        write_file(&out_dir.join(&file), &bytes)?;
        entries.push(ManifestEntry {
            path: file.clone(),
            sha256: sha256_hex(&bytes),
        });
        records.push(AnnotationRecord {
            id,
            file,
            magnification: scene.magnification,
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectAnnotation { class: o.class, bbox: o.bbox })
                .collect(),
        });
    }
    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    save_annotations(&records, &ann_path)?;
    let ann_bytes = std::fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let manifest = DatasetManifest {
        schema_version: ANNOTATION_SCHEMA_VERSION,
        seed,
        n_images,
        annotations: ManifestEntry {
            path: ANNOTATIONS_FILE.to_string(),
            sha256: sha256_hex(&ann_bytes),
        },
        images: entries,
    };
    write_file(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Drops records without any target-class object (noise-only or empty).
pub fn filter_noise_only(records: Vec<AnnotationRecord>) -> Vec<AnnotationRecord> {
    records
        .into_iter()
        .filter(|r| r.objects.iter().any(|o| o.class != ParticleClass::Noise))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<AnnotationRecord>,
    pub val: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[AnnotationRecord] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded shuffle into train/val/test. The test part takes
/// `floor(n * test_fraction)` records (at least one); train takes
/// `round(|trainval| * train_fraction)` of the rest, leaving at least one for
/// validation.
pub fn split(records: &[AnnotationRecord], test_fraction: f64, train_fraction: f64, seed: u64) -> Result<Splits> {
    let n = records.len();
    if n < 3 {
        return Err(Error::Split(n));
    }
    for f in [test_fraction, train_fraction] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidArgument(format!("split fractions must lie in (0,1), got {f}")));
        }
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).floor() as usize).clamp(1, n - 2);
    let n_trainval = n - n_test;
    let n_train = ((n_trainval as f64 * train_fraction).round() as usize).clamp(1, n_trainval - 1);
    let test = shuffled.split_off(n_trainval);
    let val = shuffled.split_off(n_train);
    Ok(Splits {
        train: shuffled,
        val,
        test,
    })
}

pub fn save_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let file = AnnotationFile {
        schema_version: ANNOTATION_SCHEMA_VERSION,
        images: records.to_vec(),
    };
    write_file(path, serde_json::to_string_pretty(&file)?.as_bytes())
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != ANNOTATION_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: ANNOTATION_SCHEMA_VERSION,
        });
    }
    let file: AnnotationFile = serde_json::from_value(raw)?;
    Ok(file.images)
}

/// Loads the image of `record`, resolving its path against `root`.
pub fn to_sample(record: &AnnotationRecord, root: &Path) -> Result<Sample> {
    let path: PathBuf = root.join(&record.file);
    let image = image::open(&path)?.to_rgb8();
    Ok(Sample {
        id: record.id.clone(),
        image,
        gts: record.ground_truth(),
    })
}

pub fn load_samples(records: &[AnnotationRecord], root: &Path) -> Result<Vec<Sample>> {
    records.iter().map(|r| to_sample(r, root)).collect()
}

/// Reads `annotations.json` from a dataset directory, drops noise-only
/// images and splits the rest with the standard 1/20 and 5/6 fractions.
pub fn load_dataset(dir: &Path, seed: u64) -> Result<Splits> {
    let records = filter_noise_only(load_annotations(&dir.join(ANNOTATIONS_FILE))?);
    split(&records, 1.0 / 20.0, 5.0 / 6.0, seed)
}

/// Renders `n` scenes in memory as training samples, noise removed.
pub fn generate_samples(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let scene = generate_scene(spec, image_seed(seed, i as u64))?;
            Ok(Sample {
                id: format!("{i:06}"),
                gts: scene
                    .objects
                    .iter()
                    .filter_map(|o| o.class.class_id().map(|class_id| GroundTruth { bbox: o.bbox, class_id }))
                    .collect(),
                image: scene.image,
            })
        })
        .collect()
}
