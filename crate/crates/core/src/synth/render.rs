use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassProfile, Magnification, ParticleClass, SceneSpec, ShapeFamily};
use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};

/// A placed particle with its footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObject {
    pub class: ParticleClass,
    /// Tight integer-aligned box around `mask`.
    pub bbox: BBox,
    /// Row-major footprint covering exactly `bbox`.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub magnification: Magnification,
    /// Placement order; noise blobs included.
    pub objects: Vec<RenderedObject>,
}

/// Derives the seed of image `index` from a dataset seed (splitmix64).
pub fn image_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Sprite {
    w: usize,
    h: usize,
    /// Per-pixel lightening toward white in `[0,1]`, `None` outside.
    tone: Vec<Option<f64>>,
}

fn point_in_polygon(x: f64, y: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn sprite<R: Rng>(profile: &ClassProfile, rng: &mut R) -> Sprite {
    let size = uniform(rng, profile.size);
    let r = size / 2.0;
    let side = size.ceil() as usize + 4;
    let c = side as f64 / 2.0;
    let shape: Box<dyn Fn(f64, f64) -> Option<f64>> = match profile.shape {
        ShapeFamily::Disk => Box::new(move |dx: f64, dy: f64| {
            let d = (dx * dx + dy * dy).sqrt();
            (d <= r).then(|| if d < 0.35 * r { 0.25 } else { 0.0 })
        }),
        ShapeFamily::Ring => Box::new(move |dx: f64, dy: f64| {
            let d = (dx * dx + dy * dy).sqrt();
            (d <= r).then(|| if d < 0.6 * r { 0.55 } else { 0.0 })
        }),
        ShapeFamily::Polygon { sides, jitter } => {
            let k = rng.gen_range(sides[0].min(sides[1])..=sides[1].max(sides[0])).max(3) as usize;
            let theta0 = rng.gen_range(0.0..2.0 * PI);
            let pts: Vec<(f64, f64)> = (0..k)
                .map(|i| {
                    let a = theta0 + 2.0 * PI * i as f64 / k as f64;
                    let ri = r * (1.0 - jitter * rng.gen_range(0.0..1.0));
                    (ri * a.cos(), ri * a.sin())
                })
                .collect();
            Box::new(move |dx, dy| point_in_polygon(dx, dy, &pts).then_some(0.0))
        }
        ShapeFamily::ElongatedRod { aspect } => {
            let half_len = r;
            let half_w = r / uniform(rng, aspect);
            let vertical = rng.gen_bool(0.5);
            Box::new(move |dx: f64, dy: f64| {
                let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
                let core = half_len - half_w;
                let t = along.abs().min(core);
                let inside = (along.abs() - t).hypot(across) <= half_w;
                inside.then_some(0.1)
            })
        }
        ShapeFamily::Ellipse { aspect } => {
            let b = r / uniform(rng, aspect);
            let phi = rng.gen_range(0.0..PI);
            let (s, co) = phi.sin_cos();
            Box::new(move |dx, dy| {
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                ((u / r).powi(2) + (v / b).powi(2) <= 1.0).then_some(0.0)
            })
        }
    };
    let mut full = vec![None; side * side];
    for y in 0..side {
        for x in 0..side {
            full[y * side + x] = shape(x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        }
    }
    if full.iter().all(Option::is_none) {
        full[(side / 2) * side + side / 2] = Some(0.0);
    }
    let rows: Vec<usize> = (0..side).filter(|&y| (0..side).any(|x| full[y * side + x].is_some())).collect();
    let cols: Vec<usize> = (0..side).filter(|&x| (0..side).any(|y| full[y * side + x].is_some())).collect();
    let (y0, y1) = (rows[0], *rows.last().expect("non-empty"));
    let (x0, x1) = (cols[0], *cols.last().expect("non-empty"));
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut tone = Vec::with_capacity(w * h);
    for y in y0..=y1 {
        tone.extend_from_slice(&full[y * side + x0..=y * side + x1]);
    }
    Sprite { w, h, tone }
}

fn background<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<[f64; 3]> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let bg = &spec.background;
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(0.01..0.05) * 2.0 * PI;
            let dir = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (freq * dir.cos(), freq * dir.sin(), phase)
        })
        .collect();
    let noise = Normal::new(0.0, bg.noise.max(0.0)).expect("finite sigma");
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves.iter().map(|(fx, fy, p)| (fx * x as f64 + fy * y as f64 + p).sin()).sum::<f64>() / 3.0;
            let base = bg.texture * t + noise.sample(rng);
            px.push([bg.color[0] + base, bg.color[1] + base, bg.color[2] + base]);
        }
    }
    px
}

fn place<R: Rng>(
    spec: &SceneSpec,
    class: ParticleClass,
    w: usize,
    h: usize,
    placed: &[RenderedObject],
    rng: &mut R,
) -> Result<(usize, usize)> {
    let (sw, sh) = (spec.width as usize, spec.height as usize);
    let fail = || Error::PlacementFailure {
        class: class.name().to_string(),
        attempts: spec.max_attempts,
    };
    if w > sw || h > sh {
        return Err(fail());
    }
    for _ in 0..spec.max_attempts {
        let x = rng.gen_range(0..=sw - w);
        let y = rng.gen_range(0..=sh - h);
        let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        if placed.iter().all(|o| iou(&o.bbox, &b) <= spec.max_overlap_iou) {
            return Ok((x, y));
        }
    }
    Err(fail())
}

/// Renders one scene; `seed` fixes every pixel and box.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let magnification = if rng.gen_bool(spec.high_power_fraction) {
        Magnification::High
    } else {
        Magnification::Low
    };
    let mut px = background(spec, &mut rng);
    let width = spec.width as usize;
    let pixel_noise = Normal::new(0.0, spec.background.noise.max(0.0) * 0.5).expect("finite sigma");
    let mut objects: Vec<RenderedObject> = Vec::new();

    for profile in &spec.profiles {
        if profile.magnification.is_some_and(|m| m != magnification) {
            continue;
        }
        let count = rng.gen_range(profile.count.min..=profile.count.max);
        for _ in 0..count {
            let s = sprite(profile, &mut rng);
            let (x0, y0) = place(spec, profile.class, s.w, s.h, &objects, &mut rng)?;
            let jitter = Normal::new(0.0, profile.color_jitter.max(0.0)).expect("finite sigma");
            let shift = [jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng)];
            let alpha = profile.contrast;
            for dy in 0..s.h {
                for dx in 0..s.w {
                    let Some(t) = s.tone[dy * s.w + dx] else { continue };
                    let n = pixel_noise.sample(&mut rng);
                    let p = &mut px[(y0 + dy) * width + x0 + dx];
                    for ch in 0..3 {
                        let col = (profile.color[ch] + shift[ch]) * (1.0 - t) + 255.0 * t + n;
                        p[ch] = p[ch] * (1.0 - alpha) + col * alpha;
                    }
                }
            }
            objects.push(RenderedObject {
                class: profile.class,
                bbox: BBox::new(x0 as f64, y0 as f64, (x0 + s.w) as f64, (y0 + s.h) as f64),
                mask: s.tone.iter().map(Option::is_some).collect(),
            });
        }
    }

    let mut image = RgbImage::new(spec.width, spec.height);
    for (i, p) in image.pixels_mut().enumerate() {
        let v = px[i];
        *p = Rgb([0, 1, 2].map(|c| v[c].round().clamp(0.0, 255.0) as u8));
    }
    if spec.blur_sigma > 0.0 {
        image = image::imageops::blur(&image, spec.blur_sigma as f32);
    }
    Ok(Scene {
        image,
        magnification,
        objects,
    })
}
