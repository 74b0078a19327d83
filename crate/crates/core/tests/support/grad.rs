//! Central finite-difference checks of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sediment::boxes::{BBox, GroundTruth};
use sediment::config::{DetectorKind, ExperimentConfig};
use sediment::detector::frcnn::{FasterRcnn, StepOptions};
use sediment::detector::ssd::Ssd;
use sediment::nets::backbone::StageConfig;
use sediment::nets::layers::{Conv2d, Init};
use sediment::nets::{Backbone, BackboneConfig, Matrix, Module, MsFuse, RoiHead, RoiPool, RpnHead, SsdNet, Taps, Volume};
use sediment::trainer::multitask_loss;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn volume(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Volume {
    Volume::from_data(c, h, w, randn(c * h * w, r))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares stored parameter gradients of `m` against central differences of
/// `loss`, sampling up to `per_param` entries of every parameter.
fn check_params<M: Module + Clone>(what: &str, m: &M, loss: impl Fn(&mut M) -> f64, per_param: usize, r: &mut ChaCha8Rng) {
    let params = m.params();
    let mut informative = 0;
    for (pi, p) in params.iter().enumerate() {
        let picks: Vec<usize> = if p.len() <= per_param {
            (0..p.len()).collect()
        } else {
            (0..per_param).map(|_| r.gen_range(0..p.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut c = m.clone();
                c.params_mut()[pi].value[i] += delta;
                loss(&mut c)
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            let e = rel_err(p.grad[i], numeric);
            assert!(e < TOL, "{what}: {}[{i}] analytic {} numeric {numeric} rel {e}", p.name, p.grad[i]);
            informative += usize::from(numeric.abs() > 1e-6);
        }
    }
    assert!(informative >= params.len() / 2, "{what}: only {informative} non-trivial gradients checked");
}

fn check_input(what: &str, x: &[f64], dx: &[f64], loss: impl Fn(&[f64]) -> f64, n: usize, r: &mut ChaCha8Rng) {
    assert_eq!(x.len(), dx.len(), "{what}: input gradient shape");
    let mut informative = 0;
    let live: Vec<usize> = (0..dx.len()).filter(|&i| dx[i] != 0.0).collect();
    for k in 0..n {
        let i = if k % 2 == 0 && !live.is_empty() {
            live[r.gen_range(0..live.len())]
        } else {
            r.gen_range(0..x.len())
        };
        let mut a = x.to_vec();
        a[i] += EPS;
        let mut b = x.to_vec();
        b[i] -= EPS;
        let numeric = (loss(&a) - loss(&b)) / (2.0 * EPS);
        let e = rel_err(dx[i], numeric);
        assert!(e < TOL, "{what}: input[{i}] analytic {} numeric {numeric} rel {e}", dx[i]);
        informative += usize::from(numeric.abs() > 1e-6);
    }
    assert!(informative > 0, "{what}: no non-trivial input gradient checked");
}

pub fn conv2d_strided() {
    let mut r = rng(1);
    let mut conv = Conv2d::new("c", 3, 4, 3, 2, 1, Init::He, &mut r);
    let x = volume(3, 7, 6, &mut r);
    let out = conv.forward(&x);
    let proj = randn(out.data.len(), &mut r);
    conv.zero_grad();
    conv.forward(&x);
    let dx = conv.backward(&Volume::from_data(out.channels, out.height, out.width, proj.clone()));
    check_params("conv", &conv, |c| dot(&proj, &c.forward(&x).data), 8, &mut r);
    let c0 = conv.clone();
    check_input(
        "conv",
        &x.data,
        &dx.data,
        |d| dot(&proj, &c0.clone().forward(&Volume::from_data(3, 7, 6, d.to_vec())).data),
        20,
        &mut r,
    );
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        in_channels: 3,
        stages: vec![
            StageConfig { name: "a".into(), channels: 4, stride: 2, convs: 1 },
            StageConfig { name: "b".into(), channels: 5, stride: 2, convs: 2 },
        ],
        taps: vec!["a".into(), "b".into()],
    }
}

pub fn backbone_two_taps() {
    let mut r = rng(2);
    let mut net = Backbone::new(&small_backbone(), &mut r).unwrap();
    let x = volume(3, 9, 10, &mut r);
    let taps = net.forward(&x);
    let projs: Vec<Vec<f64>> = taps.values().map(|v| randn(v.data.len(), &mut r)).collect();
    let loss = |n: &mut Backbone, x: &Volume| -> f64 {
        n.forward(x).values().zip(&projs).map(|(v, p)| dot(&v.data, p)).sum()
    };
    net.zero_grad();
    net.forward(&x);
    let grads: Taps = taps
        .iter()
        .zip(&projs)
        .map(|((k, v), p)| (k.clone(), Volume::from_data(v.channels, v.height, v.width, p.clone())))
        .collect();
    let dx = net.backward(&grads).unwrap();
    check_params("backbone", &net, |n| loss(n, &x), 6, &mut r);
    let n0 = net.clone();
    check_input(
        "backbone",
        &x.data,
        &dx.data,
        |d| loss(&mut n0.clone(), &Volume::from_data(3, 9, 10, d.to_vec())),
        20,
        &mut r,
    );
}

pub fn rpn_head() {
    let mut r = rng(3);
    let mut head = RpnHead::new(5, 6, 3, &mut r);
    let f = volume(5, 4, 5, &mut r);
    let out = head.forward(&f);
    let a = randn(out.logits.len(), &mut r);
    let b: Vec<[f64; 4]> = (0..out.deltas.len()).map(|_| [0, 1, 2, 3].map(|_| r.gen_range(-1.0..1.0))).collect();
    let loss = |h: &mut RpnHead, f: &Volume| {
        let o = h.forward(f);
        dot(&a, &o.logits) + o.deltas.iter().zip(&b).map(|(d, w)| dot(&d.to_array(), w)).sum::<f64>()
    };
    head.zero_grad();
    head.forward(&f);
    let df = head.backward(&a, &b);
    check_params("rpn", &head, |h| loss(h, &f), 8, &mut r);
    let h0 = head.clone();
    check_input(
        "rpn",
        &f.data,
        &df.data,
        |d| loss(&mut h0.clone(), &Volume::from_data(5, 4, 5, d.to_vec())),
        20,
        &mut r,
    );
}

pub fn roi_head() {
    let mut r = rng(4);
    let mut head = RoiHead::new(12, 10, 3, &mut r);
    let x = Matrix::from_data(4, 12, randn(48, &mut r));
    let a = Matrix::from_data(4, 4, randn(16, &mut r));
    let b = Matrix::from_data(4, 12, randn(48, &mut r));
    let loss = |h: &mut RoiHead, x: &Matrix| {
        let o = h.forward(x);
        dot(&a.data, &o.logits.data) + dot(&b.data, &o.deltas.data)
    };
    head.zero_grad();
    head.forward(&x);
    let dx = head.backward(&a, &b);
    check_params("roi_head", &head, |h| loss(h, &x), 8, &mut r);
    let h0 = head.clone();
    check_input(
        "roi_head",
        &x.data,
        &dx.data,
        |d| loss(&mut h0.clone(), &Matrix::from_data(4, 12, d.to_vec())),
        20,
        &mut r,
    );
}

pub fn roi_pool_routing() {
    let mut r = rng(5);
    let f = volume(3, 8, 8, &mut r);
    let rois = [
        BBox::new(2.0, 3.0, 20.0, 17.0),
        BBox::new(0.0, 0.0, 31.0, 31.0),
        BBox::new(10.0, 12.0, 14.0, 15.0),
    ];
    let mut pool = RoiPool::new(2, 3);
    let out = pool.forward(&f, 4.0, &rois).unwrap();
    let g = Matrix::from_data(out.rows, out.cols, randn(out.data.len(), &mut r));
    let df = pool.backward(&g);
    check_input(
        "roi_pool",
        &f.data,
        &df.data,
        |d| dot(&g.data, &RoiPool::new(2, 3).forward(&Volume::from_data(3, 8, 8, d.to_vec()), 4.0, &rois).unwrap().data),
        40,
        &mut r,
    );
}

pub fn ms_fuse() {
    let mut r = rng(6);
    let mut fuse = MsFuse::new(&[3, 4, 5], 6, 2, 2, 10.0, &mut r).unwrap();
    let vols = [volume(3, 16, 16, &mut r), volume(4, 8, 8, &mut r), volume(5, 4, 4, &mut r)];
    let strides = [2.0, 4.0, 8.0];
    let rois = [BBox::new(3.0, 4.0, 21.0, 27.0), BBox::new(10.0, 2.0, 30.0, 12.0)];
    let run = |m: &mut MsFuse, vs: &[Volume]| {
        let taps: Vec<(&Volume, f64)> = vs.iter().zip(strides).collect();
        m.forward(&taps, &rois).unwrap()
    };
    let out = run(&mut fuse, &vols);
    let g = Matrix::from_data(out.rows, out.cols, randn(out.data.len(), &mut r));
    fuse.zero_grad();
    run(&mut fuse, &vols);
    let dv = fuse.backward(&g);
    check_params("ms_fuse", &fuse, |m| dot(&g.data, &run(m, &vols).data), 10, &mut r);
    for t in 0..3 {
        let f0 = fuse.clone();
        let shape = vols[t].shape();
        check_input(
            "ms_fuse",
            &vols[t].data,
            &dv[t].data,
            |d| {
                let mut vs = vols.clone();
                vs[t] = Volume::from_data(shape.0, shape.1, shape.2, d.to_vec());
                dot(&g.data, &run(&mut f0.clone(), &vs).data)
            },
            15,
            &mut r,
        );
    }
}

pub fn multibox_head() {
    let mut r = rng(7);
    let cfg = ExperimentConfig::desk_ssd(DetectorKind::Ssd).ssd_config().unwrap().unwrap();
    let input = 32;
    let expected = cfg
        .head
        .default_box_spec(&cfg.backbone, input, cfg.s_min, cfg.s_max)
        .unwrap()
        .total_boxes();
    let mut backbone = Backbone::new(&cfg.backbone, &mut r).unwrap();
    let taps = backbone.forward(&volume(3, input, input, &mut r));
    let mut net = SsdNet::new(&cfg.head, &cfg.backbone, 3, &mut r).unwrap();
    let out = net.forward(&taps, expected).unwrap();
    let a = Matrix::from_data(out.logits.rows, out.logits.cols, randn(out.logits.data.len(), &mut r));
    let b: Vec<[f64; 4]> = (0..out.deltas.len()).map(|_| [0, 1, 2, 3].map(|_| r.gen_range(-1.0..1.0))).collect();
    let loss = |n: &mut SsdNet, t: &Taps| {
        let o = n.forward(t, expected).unwrap();
        dot(&a.data, &o.logits.data) + o.deltas.iter().zip(&b).map(|(d, w)| dot(&d.to_array(), w)).sum::<f64>()
    };
    net.zero_grad();
    net.forward(&taps, expected).unwrap();
    let dt = net.backward(&a, &b);
    check_params("multibox", &net, |n| loss(n, &taps), 4, &mut r);
    for (name, v) in &taps {
        let n0 = net.clone();
        check_input(
            "multibox",
            &v.data,
            &dt[name].data,
            |d| {
                let mut t = taps.clone();
                t.insert(name.clone(), Volume::from_data(v.channels, v.height, v.width, d.to_vec()));
                loss(&mut n0.clone(), &t)
            },
            15,
            &mut r,
        );
    }
}

pub fn multitask_loss_gradients() {
    let mut r = rng(8);
    let n = 6;
    let logits = Matrix::from_data(n, 4, randn(n * 4, &mut r));
    let cls = vec![0, 2, 3, 0, 1, 2];
    let pred: Vec<[f64; 4]> = (0..n).map(|_| [0, 1, 2, 3].map(|_| r.gen_range(-2.0..2.0))).collect();
    let tgt: Vec<Option<[f64; 4]>> = cls
        .iter()
        .map(|&c| (c > 0).then(|| [0, 1, 2, 3].map(|_| r.gen_range(-2.0..2.0))))
        .collect();
    let lambda = 1.5;
    let out = multitask_loss(&logits, &cls, &pred, &tgt, lambda);
    let l_of_logits = |d: &[f64]| multitask_loss(&Matrix::from_data(n, 4, d.to_vec()), &cls, &pred, &tgt, lambda).total;
    check_input("loss/logits", &logits.data, &out.d_logits.data, l_of_logits, 24, &mut r);
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    let dflat: Vec<f64> = out.d_deltas.iter().flatten().copied().collect();
    let l_of_deltas = |d: &[f64]| {
        let p: Vec<[f64; 4]> = d.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        multitask_loss(&logits, &cls, &p, &tgt, lambda).total
    };
    check_input("loss/deltas", &flat, &dflat, l_of_deltas, 24, &mut r);
}

fn scene() -> (Volume, Vec<GroundTruth>) {
    let mut r = rng(9);
    let x = Volume::from_data(3, 48, 48, randn(3 * 48 * 48, &mut r));
    let gts = vec![
        GroundTruth { bbox: BBox::new(4.0, 6.0, 20.0, 18.0), class_id: 1 },
        GroundTruth { bbox: BBox::new(24.0, 20.0, 44.0, 30.0), class_id: 2 },
    ];
    (x, gts)
}

fn frcnn_end_to_end(kind: DetectorKind) {
    let cfg = ExperimentConfig::desk_frcnn(kind);
    let mut r = rng(10);
    let mut model = FasterRcnn::new(cfg.frcnn.as_ref().unwrap(), kind.frcnn_variant().unwrap(), 3, &mut r).unwrap();
    let (x, gts) = scene();
    let rois: Vec<BBox> = (0..24)
        .map(|_| {
            let (x0, y0) = (r.gen_range(0.0..30.0), r.gen_range(0.0..30.0));
            BBox::new(x0, y0, x0 + r.gen_range(6.0..18.0), y0 + r.gen_range(6.0..18.0))
        })
        .chain(gts.iter().map(|g| g.bbox))
        .collect();
    let opts = StepOptions {
        assign: cfg.assignment,
        ohem: cfg.ohem,
        lambda: 1.0,
    };
    let step = |m: &mut FasterRcnn| m.train_step(&x, &gts, &opts, &mut rng(11), Some(&rois)).unwrap().total;
    model.zero_grad();
    step(&mut model);
    check_params(&format!("{kind:?}"), &model, step, 3, &mut r);
}

pub fn frcnn_plain_end_to_end() {
    frcnn_end_to_end(DetectorKind::Frcnn);
}

pub fn frcnn_multiscale_end_to_end() {
    frcnn_end_to_end(DetectorKind::MsFrcnn);
}

pub fn frcnn_ohem_end_to_end() {
    frcnn_end_to_end(DetectorKind::OhemFrcnn);
}

pub fn ssd_end_to_end() {
    let mut cfg = ExperimentConfig::desk_ssd(DetectorKind::TrimmedSsd).ssd_config().unwrap().unwrap();
    cfg.input_size = 48;
    let mut r = rng(12);
    let mut model = Ssd::new(&cfg, 3, &mut r).unwrap();
    let (x, gts) = scene();
    let assign = ExperimentConfig::desk_ssd(DetectorKind::TrimmedSsd).assignment;
    model.zero_grad();
    model.train_step(&x, &gts, &assign, 1.0).unwrap();
    check_params("ssd", &model, |m| m.train_step(&x, &gts, &assign, 1.0).unwrap().total, 3, &mut r);
}

/// Every check with the component it covers.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d", conv2d_strided),
    ("backbone", backbone_two_taps),
    ("rpn head", rpn_head),
    ("roi head", roi_head),
    ("roi pool", roi_pool_routing),
    ("ms_fuse", ms_fuse),
    ("multibox", multibox_head),
    ("losses", multitask_loss_gradients),
    ("frcnn step", frcnn_plain_end_to_end),
    ("ms-frcnn step", frcnn_multiscale_end_to_end),
    ("ohem-frcnn step", frcnn_ohem_end_to_end),
    ("ssd step", ssd_end_to_end),
];
