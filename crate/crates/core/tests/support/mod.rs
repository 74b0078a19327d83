//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sediment::boxes::{iou, BBox, Detection, GroundTruth};
use sediment::config::{DetectorKind, ExperimentConfig};
use sediment::detector::frcnn::{FasterRcnn, StepOptions};
use sediment::nets::{Module, Volume};

/// IoU of integer boxes by counting unit cells.
pub fn grid_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (lo_x, hi_x) = (a[0].min(b[0]), a[2].max(b[2]));
    let (lo_y, hi_y) = (a[1].min(b[1]), a[3].max(b[3]));
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Overlap by inclusion-exclusion on sorted interval endpoints.
pub fn interval_iou(a: &BBox, b: &BBox) -> f64 {
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| {
        let mut v = [(a0, 0), (a1, 0), (b0, 1), (b1, 1)];
        v.sort_by(|p, q| p.0.total_cmp(&q.0));
        if v[0].1 == v[1].1 {
            0.0
        } else {
            v[2].0 - v[1].0
        }
    };
    let i = overlap(a.x_min, a.x_max, b.x_min, b.x_max) * overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let u = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn int_box(r: &mut ChaCha8Rng) -> [i64; 4] {
    let x = r.gen_range(0..30);
    let y = r.gen_range(0..30);
    [x, y, x + r.gen_range(1..15), y + r.gen_range(1..15)]
}

pub fn as_bbox(b: [i64; 4]) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
}

pub fn random_dets(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: random_box(r, 100.0, 5.0, 40.0),
            class_id: r.gen_range(1..=classes),
            // coarse scores so ties occur
            score: r.gen_range(0..20) as f64 / 20.0,
        })
        .collect()
}

pub fn micro_dataset(r: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let images = r.gen_range(1..5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut budget_d = r.gen_range(0..=200usize);
    let mut budget_g = r.gen_range(0..=20usize);
    for i in 0..images {
        let nd = if i + 1 == images { budget_d } else { r.gen_range(0..=budget_d) };
        let ng = if i + 1 == images { budget_g } else { r.gen_range(0..=budget_g) };
        budget_d -= nd;
        budget_g -= ng;
        let g: Vec<GroundTruth> = (0..ng)
            .map(|_| GroundTruth {
                bbox: random_box(r, 100.0, 8.0, 40.0),
                class_id: r.gen_range(1..=3),
            })
            .collect();
        let mut d = random_dets(r, nd, 3);
        // jittered copies of the gts so true positives happen
        for (k, x) in d.iter_mut().enumerate() {
            if !g.is_empty() && k % 2 == 0 {
                let t = g[r.gen_range(0..g.len())];
                let j = r.gen_range(-4.0..4.0);
                x.bbox = BBox::new(t.bbox.x_min + j, t.bbox.y_min, t.bbox.x_max + j, t.bbox.y_max);
                x.class_id = t.class_id;
            }
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let w = r.gen_range(min_side..max_side);
    let h = r.gen_range(min_side..max_side);
    let x = r.gen_range(0.0..extent - w);
    let y = r.gen_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

/// Repeatedly takes the best remaining detection (lowest index on equal
/// scores) and deletes everything of its class overlapping it.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        out.push(dets[best]);
        alive.retain(|&i| {
            i != best && !(dets[i].class_id == dets[best].class_id && interval_iou(&dets[i].bbox, &dets[best].bbox) >= thr)
        });
    }
    out
}

/// Loss-ranked greedy selection written as repeated arg-max.
pub fn ohem_oracle(losses: &[f64], boxes: &[BBox], batch: usize, dedup: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..losses.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() && out.len() < batch {
        let mut best = alive[0];
        for &i in &alive {
            if losses[i] > losses[best] || (losses[i] == losses[best] && i < best) {
                best = i;
            }
        }
        out.push(best);
        alive.retain(|&i| i != best && interval_iou(&boxes[i], &boxes[best]) < dedup);
    }
    out
}

/// Average precision computed from scratch: rank, match each detection to
/// the best still-free gt of its image, then integrate the precision
/// envelope by taking, for every recall step, the best precision at that
/// rank or later.
pub fn voc_ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|g| g.class_id == class_id).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize, usize)> = Vec::new();
    let mut flat = 0;
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class_id == class_id {
                ranked.push((d.score, flat, img, k));
            }
            flat += 1;
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for (rank, &(_, _, img, k)) in ranked.iter().enumerate() {
        let d = &dets[img][k];
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for (j, g) in gts.get(img).map_or(&[][..], |g| &g[..]).iter().enumerate() {
            if g.class_id != class_id || used[img][j] {
                continue;
            }
            let o = interval_iou(&d.bbox, &g.bbox);
            if o >= best_iou && best.map_or(true, |_| o > best_iou) {
                best = Some(j);
                best_iou = o;
            }
        }
        if let Some(j) = best {
            used[img][j] = true;
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..recall.len() {
        let envelope = precision[i..].iter().copied().fold(0.0, f64::max);
        ap += (recall[i] - prev) * envelope;
        prev = recall[i];
    }
    Some(ap)
}

/// Anchor labelling spelled out per gt: collect each gt's best inside
/// anchors first, then threshold the rest. Returns 1 for foreground, 0 for
/// background and -1 for ignored.
pub fn rpn_labels_oracle(anchors: &[BBox], gts: &[BBox], w: f64, h: f64, pos: f64, neg: f64) -> Vec<i8> {
    let inside = |a: &BBox| a.x_min >= 0.0 && a.y_min >= 0.0 && a.x_max <= w && a.y_max <= h;
    let mut labels = vec![-1i8; anchors.len()];
    for g in gts {
        let best = anchors
            .iter()
            .filter(|a| inside(a))
            .map(|a| interval_iou(a, g))
            .fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if inside(a) && interval_iou(a, g) == best {
                labels[i] = 1;
            }
        }
    }
    for (i, a) in anchors.iter().enumerate() {
        if !inside(a) || labels[i] == 1 {
            continue;
        }
        let max = gts.iter().map(|g| interval_iou(a, g)).fold(0.0, f64::max);
        if !gts.is_empty() && max >= pos {
            labels[i] = 1;
        } else if max < neg {
            labels[i] = 0;
        }
    }
    labels
}

/// Default-box matching: per gt claim, then threshold. Returns the matched
/// gt per box.
pub fn ssd_match_oracle(boxes: &[BBox], gts: &[BBox], thr: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; boxes.len()];
    for (g, gt) in gts.iter().enumerate() {
        let free: Vec<usize> = (0..boxes.len()).filter(|&i| out[i].is_none()).collect();
        let mut pick = None;
        let mut best = f64::NEG_INFINITY;
        for i in free {
            let o = interval_iou(&boxes[i], gt);
            if o > best {
                best = o;
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            out[i] = Some(g);
        }
    }
    let claimed: Vec<bool> = out.iter().map(Option::is_some).collect();
    for (i, b) in boxes.iter().enumerate() {
        if claimed[i] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let o = interval_iou(b, gt);
            if best.map_or(true, |(_, m)| o > m) {
                best = Some((g, o));
            }
        }
        if let Some((g, o)) = best {
            if o >= thr {
                out[i] = Some(g);
            }
        }
    }
    out
}

/// Hard negatives by full sort on (loss desc, index asc).
pub fn hard_negative_oracle(losses: &[f64], is_neg: &[bool], quota: usize) -> Vec<usize> {
    let mut neg: Vec<usize> = (0..losses.len()).filter(|&i| is_neg[i]).collect();
    neg.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap().then(a.cmp(&b)));
    neg.truncate(quota);
    neg.sort_unstable();
    neg
}

/// One step of the plain and the OHEM detector from identical weights, with
/// every ROI labelled, the minibatch large enough to take them all and no
/// pair of ROIs close enough to be de-duplicated. Returns the largest
/// absolute difference between the two parameter gradients.
pub fn ohem_plain_gradient_gap(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let image = Volume::from_data(3, 64, 64, (0..3 * 64 * 64).map(|_| r.gen_range(-1.0..1.0)).collect());
    let gts = vec![
        GroundTruth { bbox: BBox::new(6.0, 8.0, 26.0, 22.0), class_id: 1 },
        GroundTruth { bbox: BBox::new(34.0, 30.0, 58.0, 44.0), class_id: 3 },
    ];
    let mut rois: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    while rois.len() < 20 {
        let b = random_box(&mut r, 64.0, 6.0, 24.0);
        if rois.iter().all(|o| iou(o, &b) < 0.6) {
            rois.push(b);
        }
    }
    let mut grads = Vec::new();
    for kind in [DetectorKind::Frcnn, DetectorKind::OhemFrcnn] {
        let mut cfg = ExperimentConfig::desk_frcnn(kind);
        cfg.assignment.roi_batch = 4 * rois.len();
        cfg.ohem.batch_size = rois.len();
        let opts = StepOptions { assign: cfg.assignment, ohem: cfg.ohem, lambda: 1.0 };
        let fr = cfg.frcnn.as_ref().expect("frcnn preset");
        let mut m = FasterRcnn::new(fr, kind.frcnn_variant().expect("frcnn kind"), 3, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
        m.zero_grad();
        m.train_step(&image, &gts, &opts, &mut ChaCha8Rng::seed_from_u64(seed + 2), Some(&rois)).unwrap();
        grads.push(m.params().iter().flat_map(|p| p.grad.clone()).collect::<Vec<f64>>());
    }
    assert_eq!(grads[0].len(), grads[1].len());
    assert!(grads[0].iter().any(|g| *g != 0.0));
    grads[0].iter().zip(&grads[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
