//! Seeded synthetic urine-sediment scenes.
//!
//! Seven particle classes plus annotated noise blobs are drawn as stylized
//! parametric shapes over a textured background. Each scene is taken at one
//! magnification and only contains the classes annotated at that
//! magnification.

mod dataset;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    build_dataset, filter_noise_only, generate_samples, load_annotations, load_dataset, load_samples,
    save_annotations, split, to_sample, AnnotationFile, AnnotationRecord, DatasetManifest, ManifestEntry,
    ObjectAnnotation, Split, Splits, ANNOTATIONS_FILE, ANNOTATION_SCHEMA_VERSION, MANIFEST_FILE,
};
pub use render::{generate_scene, image_seed, RenderedObject, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleClass {
    Eryth,
    Leuko,
    Epith,
    Cryst,
    Cast,
    Mycete,
    Epithn,
    /// Annotated but never a detection target.
    Noise,
}

impl ParticleClass {
    /// The seven detection targets in class-id order.
    pub const TARGETS: [ParticleClass; 7] = [
        ParticleClass::Eryth,
        ParticleClass::Leuko,
        ParticleClass::Epith,
        ParticleClass::Cryst,
        ParticleClass::Cast,
        ParticleClass::Mycete,
        ParticleClass::Epithn,
    ];

    /// 1-based detector class id; `None` for noise.
    pub fn class_id(self) -> Option<usize> {
        Self::TARGETS.iter().position(|&c| c == self).map(|i| i + 1)
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        id.checked_sub(1).and_then(|i| Self::TARGETS.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            ParticleClass::Eryth => "eryth",
            ParticleClass::Leuko => "leuko",
            ParticleClass::Epith => "epith",
            ParticleClass::Cryst => "cryst",
            ParticleClass::Cast => "cast",
            ParticleClass::Mycete => "mycete",
            ParticleClass::Epithn => "epithn",
            ParticleClass::Noise => "noise",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::TARGETS
            .iter()
            .chain(std::iter::once(&ParticleClass::Noise))
            .find(|c| c.name() == name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }
}

pub fn class_names() -> Vec<&'static str> {
    ParticleClass::TARGETS.iter().map(|c| c.name()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnification {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Disk,
    /// Dark rim around a lighter interior.
    Ring,
    /// `sides` vertices with radial jitter as a fraction of the radius.
    Polygon { sides: [u32; 2], jitter: f64 },
    /// Axis-aligned capsule; `size` is its length and `aspect` its
    /// length:width range.
    ElongatedRod { aspect: [f64; 2] },
    /// Rotated ellipse; `size` is the major axis, `aspect` major:minor.
    Ellipse { aspect: [f64; 2] },
}

/// Particles per scene, uniform over `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountDist {
    pub min: u32,
    pub max: u32,
}

impl CountDist {
    pub fn mean(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }

    pub fn second_moment(&self) -> f64 {
        let n = (self.max - self.min + 1) as f64;
        (self.min..=self.max).map(|k| (k * k) as f64).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub class: ParticleClass,
    pub shape: ShapeFamily,
    /// Characteristic size range in pixels (diameter or length).
    pub size: [f64; 2],
    /// Mean RGB color.
    pub color: [f64; 3],
    /// Per-particle color jitter (standard deviation, 0–255 scale).
    pub color_jitter: f64,
    /// Opacity over the background in `(0,1]`; low values are low contrast.
    pub contrast: f64,
    pub count: CountDist,
    /// `None` means the class appears at both magnifications (noise).
    pub magnification: Option<Magnification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub color: [f64; 3],
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Amplitude of the low-frequency texture.
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub background: BackgroundSpec,
    pub profiles: Vec<ClassProfile>,
    /// Probability that a scene is taken at high magnification.
    pub high_power_fraction: f64,
    /// Upper bound on pairwise IoU between placed particles.
    pub max_overlap_iou: f64,
    /// Placement attempts per particle before giving up.
    pub max_attempts: usize,
    /// Gaussian blur sigma applied to the finished image; 0 disables.
    pub blur_sigma: f64,
}

fn profile(
    class: ParticleClass,
    shape: ShapeFamily,
    size: [f64; 2],
    color: [f64; 3],
    contrast: f64,
    count: [u32; 2],
    magnification: Option<Magnification>,
) -> ClassProfile {
    ClassProfile {
        class,
        shape,
        size,
        color,
        color_jitter: 6.0,
        contrast,
        count: CountDist { min: count[0], max: count[1] },
        magnification,
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.high_power_fraction) {
            return Err(Error::Config("high_power_fraction must lie in [0,1]".into()));
        }
        if !(self.max_overlap_iou >= 0.0 && self.max_overlap_iou < 1.0) || self.max_attempts == 0 {
            return Err(Error::Config("need 0 <= max_overlap_iou < 1 and max_attempts >= 1".into()));
        }
        for p in &self.profiles {
            if !(p.size[0] > 0.0 && p.size[0] <= p.size[1]) {
                return Err(Error::Config(format!("{}: size range must be positive and ordered", p.class.name())));
            }
            if p.count.min > p.count.max {
                return Err(Error::Config(format!("{}: count min exceeds max", p.class.name())));
            }
            if !(p.contrast > 0.0 && p.contrast <= 1.0) {
                return Err(Error::Config(format!("{}: contrast must lie in (0,1]", p.class.name())));
            }
            let limit = self.width.min(self.height) as f64;
            if p.size[1] + 2.0 > limit {
                return Err(Error::Config(format!("{}: particles larger than the scene", p.class.name())));
            }
            if let ShapeFamily::ElongatedRod { aspect } = p.shape {
                if aspect[0] < 3.0 || aspect[0] > aspect[1] {
                    return Err(Error::Config("rod aspect range must start at 3 or more".into()));
                }
            }
        }
        Ok(())
    }

    /// Full-size 800×600 scenes with low-contrast casts and a light blur.
    pub fn standard() -> Self {
        use Magnification::*;
        use ParticleClass::*;
        Self {
            width: 800,
            height: 600,
            background: BackgroundSpec { color: [214.0, 206.0, 188.0], noise: 7.0, texture: 12.0 },
            profiles: vec![
                profile(Eryth, ShapeFamily::Disk, [10.0, 20.0], [196.0, 120.0, 110.0], 0.7, [0, 12], Some(High)),
                profile(Leuko, ShapeFamily::Ring, [14.0, 24.0], [120.0, 110.0, 130.0], 0.7, [0, 6], Some(High)),
                profile(
                    Epith,
                    ShapeFamily::Polygon { sides: [5, 8], jitter: 0.25 },
                    [60.0, 120.0],
                    [170.0, 180.0, 150.0],
                    0.5,
                    [0, 5],
                    Some(Low),
                ),
                profile(
                    Cryst,
                    ShapeFamily::Polygon { sides: [4, 6], jitter: 0.0 },
                    [12.0, 40.0],
                    [170.0, 150.0, 190.0],
                    0.6,
                    [0, 5],
                    Some(High),
                ),
                profile(
                    Cast,
                    ShapeFamily::ElongatedRod { aspect: [3.3, 6.0] },
                    [80.0, 200.0],
                    [190.0, 200.0, 200.0],
                    0.3,
                    [0, 3],
                    Some(Low),
                ),
                profile(
                    Mycete,
                    ShapeFamily::Ellipse { aspect: [1.2, 1.6] },
                    [6.0, 12.0],
                    [200.0, 190.0, 130.0],
                    0.6,
                    [0, 6],
                    Some(High),
                ),
                profile(
                    Epithn,
                    ShapeFamily::Ellipse { aspect: [1.1, 1.5] },
                    [12.0, 22.0],
                    [140.0, 130.0, 170.0],
                    0.6,
                    [0, 4],
                    Some(High),
                ),
                profile(Noise, ShapeFamily::Disk, [2.0, 6.0], [110.0, 100.0, 90.0], 0.6, [0, 20], None),
            ],
            high_power_fraction: 0.6,
            max_overlap_iou: 0.3,
            max_attempts: 200,
            blur_sigma: 0.8,
        }
    }

    /// Small 128×128 scenes with opaque, distinctly colored particles.
    pub fn easy() -> Self {
        use Magnification::*;
        use ParticleClass::*;
        Self {
            width: 128,
            height: 128,
            background: BackgroundSpec { color: [226.0, 221.0, 206.0], noise: 4.0, texture: 6.0 },
            profiles: vec![
                profile(Eryth, ShapeFamily::Disk, [9.0, 14.0], [205.0, 40.0, 40.0], 1.0, [0, 3], Some(High)),
                profile(Leuko, ShapeFamily::Ring, [14.0, 20.0], [55.0, 55.0, 55.0], 1.0, [0, 2], Some(High)),
                profile(
                    Epith,
                    ShapeFamily::Polygon { sides: [5, 7], jitter: 0.2 },
                    [26.0, 40.0],
                    [60.0, 160.0, 60.0],
                    1.0,
                    [1, 2],
                    Some(Low),
                ),
                profile(
                    Cryst,
                    ShapeFamily::Polygon { sides: [4, 6], jitter: 0.0 },
                    [11.0, 16.0],
                    [185.0, 60.0, 200.0],
                    1.0,
                    [0, 2],
                    Some(High),
                ),
                profile(
                    Cast,
                    ShapeFamily::ElongatedRod { aspect: [3.5, 5.0] },
                    [28.0, 40.0],
                    [30.0, 170.0, 190.0],
                    1.0,
                    [1, 2],
                    Some(Low),
                ),
                profile(
                    Mycete,
                    ShapeFamily::Ellipse { aspect: [1.2, 1.5] },
                    [7.0, 10.0],
                    [215.0, 185.0, 30.0],
                    1.0,
                    [0, 2],
                    Some(High),
                ),
                profile(
                    Epithn,
                    ShapeFamily::Ellipse { aspect: [1.2, 1.5] },
                    [12.0, 16.0],
                    [50.0, 70.0, 205.0],
                    1.0,
                    [0, 2],
                    Some(High),
                ),
                profile(Noise, ShapeFamily::Disk, [2.0, 4.0], [120.0, 110.0, 100.0], 0.8, [0, 4], None),
            ],
            high_power_fraction: 0.5,
            max_overlap_iou: 0.3,
            max_attempts: 200,
            blur_sigma: 0.0,
        }
    }

    pub fn profile(&self, class: ParticleClass) -> Option<&ClassProfile> {
        self.profiles.iter().find(|p| p.class == class)
    }

    /// Expected particles of `class` per scene.
    pub fn expected_count(&self, class: ParticleClass) -> f64 {
        self.profile(class).map_or(0.0, |p| self.presence(p) * p.count.mean())
    }

    /// Variance of the per-scene particle count of `class`.
    pub fn count_variance(&self, class: ParticleClass) -> f64 {
        self.profile(class).map_or(0.0, |p| {
            let q = self.presence(p);
            let m = q * p.count.mean();
            q * p.count.second_moment() - m * m
        })
    }

    fn presence(&self, p: &ClassProfile) -> f64 {
        match p.magnification {
            None => 1.0,
            Some(Magnification::High) => self.high_power_fraction,
            Some(Magnification::Low) => 1.0 - self.high_power_fraction,
        }
    }
}
