use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{mean_ap, pr_curve, ApMethod, PrPoint};
use crate::boxes::{Detection, GroundTruth};
use crate::detector::{Model, Sample};
use crate::error::{Error, Result};
use crate::synth::ParticleClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    /// `None` when the class has no ground truth in the evaluated set.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub class: String,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config_hash: String,
    pub dataset_id: String,
    pub iou_threshold: f64,
    pub method: ApMethod,
    pub map: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub num_images: usize,
    pub num_detections: usize,
    /// Mean wall-clock inference time, excluding image I/O.
    pub seconds_per_image: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pr_curves: Vec<ClassCurve>,
}

/// Best row of the published comparison (ImageNet-pretrained PVANet on the
/// clinical data). Kept for the report layout only; it is not reproduced
/// here.
pub const PUBLISHED_BEST_ROW: (&str, f64, [f64; 7], f64) =
    ("PVANet", 0.841, [0.884, 0.843, 0.871, 0.877, 0.765, 0.890, 0.760], 0.072);

fn class_name(id: usize) -> String {
    ParticleClass::from_class_id(id).map_or_else(|| format!("class{id}"), |c| c.name().to_string())
}

impl EvalReport {
    /// Builds a report from per-image detections and ground truth.
    pub fn from_detections(
        name: &str,
        dets: &[Vec<Detection>],
        gts: &[Vec<GroundTruth>],
        num_classes: usize,
        seconds_per_image: f64,
        config_hash: &str,
        dataset_id: &str,
    ) -> Self {
        let iou_threshold = 0.5;
        let method = ApMethod::AllPoints;
        let m = mean_ap(dets, gts, num_classes, iou_threshold, method);
        let per_class = m
            .per_class
            .iter()
            .enumerate()
            .map(|(i, ap)| ClassAp {
                class: class_name(i + 1),
                ap: *ap,
            })
            .collect();
        let pr_curves = (1..=num_classes)
            .map(|c| ClassCurve {
                class: class_name(c),
                points: pr_curve(dets, gts, c, iou_threshold),
            })
            .collect();
        Self {
            name: name.to_string(),
            config_hash: config_hash.to_string(),
            dataset_id: dataset_id.to_string(),
            iou_threshold,
            method,
            map: m.map,
            per_class,
            num_images: dets.len(),
            num_detections: dets.iter().map(Vec::len).sum(),
            seconds_per_image,
            pr_curves,
        }
    }

    /// The published best row in report form.
    pub fn published_reference() -> Self {
        let (name, map, aps, time) = PUBLISHED_BEST_ROW;
        Self {
            name: name.to_string(),
            config_hash: String::new(),
            dataset_id: "clinical".to_string(),
            iou_threshold: 0.5,
            method: ApMethod::AllPoints,
            map: Some(map),
            per_class: aps
                .iter()
                .enumerate()
                .map(|(i, &ap)| ClassAp {
                    class: class_name(i + 1),
                    ap: Some(ap),
                })
                .collect(),
            num_images: 0,
            num_detections: 0,
            seconds_per_image: time,
            pr_curves: Vec::new(),
        }
    }

    pub fn ap(&self, class: ParticleClass) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class.name()).and_then(|c| c.ap)
    }

    pub fn csv_header(&self) -> String {
        let classes: Vec<&str> = self.per_class.iter().map(|c| c.class.as_str()).collect();
        format!("name,mAP,{},test_time", classes.join(","))
    }

    /// One table row: name, mAP, per-class APs, seconds per image.
    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        let aps: Vec<String> = self.per_class.iter().map(|c| fmt(c.ap)).collect();
        format!("{},{},{},{:.4}", self.name, fmt(self.map), aps.join(","), self.seconds_per_image)
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    /// Per-class PR points as `class,recall,precision,score` lines.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("class,recall,precision,score\n");
        for c in &self.pr_curves {
            for p in &c.points {
                s.push_str(&format!("{},{},{},{}\n", c.class, p.recall, p.precision, p.score));
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs the model over `images`, returning detections and mean seconds per
/// image.
pub fn timed_inference<'a>(
    model: &mut Model,
    images: impl IntoIterator<Item = &'a RgbImage>,
    pixel_mean: [f64; 3],
) -> Result<(Vec<Vec<Detection>>, f64)> {
    let mut dets = Vec::new();
    let mut total = 0.0;
    for img in images {
        let t = Instant::now();
        dets.push(model.detect(img, pixel_mean)?);
        total += t.elapsed().as_secs_f64();
    }
    let per = if dets.is_empty() { 0.0 } else { total / dets.len() as f64 };
    Ok((dets, per))
}

/// Detects on every sample and scores the result.
pub fn evaluate(
    name: &str,
    model: &mut Model,
    samples: &[Sample],
    pixel_mean: [f64; 3],
    config_hash: &str,
    dataset_id: &str,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let (dets, secs) = timed_inference(model, samples.iter().map(|s| &s.image), pixel_mean)?;
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(|s| s.gts.clone()).collect();
    let report = EvalReport::from_detections(name, &dets, &gts, model.num_classes(), secs, config_hash, dataset_id);
    Ok((report, dets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_row_is_consistent() {
        let r = EvalReport::published_reference();
        let mean = r.per_class.iter().filter_map(|c| c.ap).sum::<f64>() / 7.0;
        assert!((mean - 0.841).abs() < 1e-3);
        assert_eq!(r.csv_header(), "name,mAP,eryth,leuko,epith,cryst,cast,mycete,epithn,test_time");
        assert_eq!(
            r.csv_row(),
            "PVANet,0.8410,0.8840,0.8430,0.8710,0.8770,0.7650,0.8900,0.7600,0.0720"
        );
        assert_eq!(r.ap(ParticleClass::Cast), Some(0.765));
    }

    #[test]
    fn report_json_round_trip() {
        let g = GroundTruth {
            bbox: [0.0, 0.0, 10.0, 10.0].into(),
            class_id: 2,
        };
        let d = Detection {
            bbox: g.bbox,
            class_id: 2,
            score: 0.9,
        };
        let r = EvalReport::from_detections("t", &[vec![d]], &[vec![g]], 7, 0.01, "abc", "easy");
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.per_class.iter().filter(|c| c.ap.is_some()).count(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), r);
        assert!(r.to_csv().lines().nth(1).unwrap().starts_with("t,1.0000,,1.0000,"));
    }
}
