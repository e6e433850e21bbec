//! Oracle suite: the sparse engine and evaluators against the slow
//! references in [`crate::oracle`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use voxelflow_core::autodiff::{finite_diff, max_rel_error, Activation, Mat, ParamStore, Tape, Var};
use voxelflow_core::conv::{sparse_conv, ConvParams};
use voxelflow_core::detector::{detection_loss_graph, head_graph, head_targets, nms_bev, Detection, HeadConfig, HeadParams};
use voxelflow_core::dffm::{decouple_kernel, dffm_graph, receptive_field, DffmParams, StageKernel};
use voxelflow_core::eval::{average_precision, iou_bev, Difficulty, EvalConfig, FrameRef, IouMetric};
use voxelflow_core::fsm::{fsm_graph, FsmParams};
use voxelflow_core::rulebook::{build_rulebook, RulebookCache};
use voxelflow_core::scene::{Calib, ClassName, GroundTruth};
use voxelflow_core::voxel::GridGeometry;
use voxelflow_core::{Box3D, ConvMode, Coord, Kernel, SparseTensor};

use crate::oracle;

/// Entry `|a - n| / max(|a|, |n|, floor)` bound for gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-5;
pub const DENSE_ATOL: f64 = 1e-10;
pub const AP_ATOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Perturbs the weights on the sparse side of the dense comparison.
    pub tamper: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions { seed: 7, tamper: false }
    }
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f();
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
    }
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> SelfcheckReport {
    let s = opts.seed;
    let checks = vec![
        timed("dense_equivalence", || {
            let e = dense_equivalence(200, s, opts.tamper);
            (e.mismatched_sites == 0 && e.max_abs_err <= DENSE_ATOL, format!("{e:?}"))
        }),
        timed("gradcheck", || {
            let g = gradcheck_all(s);
            let worst = g.iter().map(|(_, e)| *e).fold(0.0, f64::max);
            (worst <= GRAD_REL_TOL, format!("{g:?}"))
        }),
        timed("nms_brute_force", || {
            let n = nms_check(1000, s);
            (n.failures == 0, format!("{n:?}"))
        }),
        timed("ap_brute_force", || {
            let a = ap_check(500, s);
            let hand = hand_ap_case();
            (a.max_abs_err <= AP_ATOL && a.mismatched == 0 && hand == 0.5, format!("{a:?}, hand case {hand}"))
        }),
        timed("rf_impulse", || {
            let radii: Vec<u32> = (1..=3).map(impulse_radius).collect();
            let rf = (
                receptive_field(&[StageKernel::new(5, 1, 1)]).unwrap_or(0),
                receptive_field(&[StageKernel::new(3, 1, 1); 2]).unwrap_or(0),
            );
            (radii == [1, 2, 3] && rf == (5, 5), format!("radii {radii:?}, rf {rf:?}"))
        }),
    ];
    SelfcheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Random active set on a `grid` with `c` channels, occupancy drawn per trial.
pub fn random_sparse(rng: &mut impl Rng, grid: [usize; 3], c: usize) -> SparseTensor {
    let density = rng.random_range(0.05..0.6);
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for x in 0..grid[0] as u32 {
        for y in 0..grid[1] as u32 {
            for z in 0..grid[2] as u32 {
                if rng.random_bool(density) {
                    coords.push(Coord::new(x, y, z));
                    feats.extend((0..c).map(|_| rng.random_range(-1.0..1.0)));
                }
            }
        }
    }
    SparseTensor::new(grid, c, coords, feats).expect("lexicographic coords")
}

pub fn random_conv(rng: &mut impl Rng, kernel: Kernel, mode: ConvMode, c_in: usize, c_out: usize, bias: bool) -> ConvParams {
    let mut p = ConvParams::zeros(kernel, mode, c_in, c_out, bias);
    p.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    if let Some(b) = p.bias.as_mut() {
        b.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    }
    p
}

#[derive(Debug, Clone, Default)]
pub struct DenseEquivalence {
    pub trials: usize,
    pub max_abs_err: f64,
    pub mismatched_sites: usize,
}

/// Sparse convolution against the dense oracle on random tensors (grid up to
/// 16 per axis, up to 8 channels, submanifold and strided kernels).
pub fn dense_equivalence(trials: usize, seed: u64, tamper: bool) -> DenseEquivalence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DenseEquivalence {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let grid = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random_sparse(&mut rng, grid, ci);
        let (kernel, mode) = if rng.random_bool(0.5) {
            let k = [1, 3, 3, 5][rng.random_range(0..4)];
            let mut kern = Kernel::new(k, rng.random_range(1..=2), 1);
            if rng.random_bool(0.2) {
                kern.size[2] = 1;
            }
            (kern, ConvMode::Submanifold)
        } else {
            (Kernel::new(rng.random_range(2..=3), 1, rng.random_range(1..=2)), ConvMode::Strided)
        };
        let bias = rng.random_bool(0.5);
        let p = random_conv(&mut rng, kernel, mode, ci, co, bias);
        let mut sparse_p = p.clone();
        if tamper {
            sparse_p.weights.iter_mut().for_each(|w| *w += 1e-6);
        }
        let got = sparse_conv(&x, &sparse_p).expect("valid conv");
        let want = oracle::dense_conv(&x, &p);
        if got.coords() != want.coords() {
            out.mismatched_sites += got.len().abs_diff(want.len()).max(1);
            continue;
        }
        for (a, b) in got.features().iter().zip(want.features()) {
            out.max_abs_err = out.max_abs_err.max((a - b).abs());
        }
    }
    out
}

/// Relative error between the tape gradient and central differences of
/// the same forward function over every entry of `store`.
pub fn gradcheck(store: &ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic = tape.param_grads(&grads, store).flatten();
    let numeric = finite_diff(
        |p| {
            let mut s = store.clone();
            s.assign_flat(p).expect("same length");
            let mut t = Tape::new();
            let l = build(&mut t, &s);
            t.value(l).item()
        },
        &store.flatten(),
        GRAD_EPS,
    );
    max_rel_error(&analytic, &numeric, GRAD_FLOOR)
}

fn add_input(store: &mut ParamStore, x: &SparseTensor) -> voxelflow_core::autodiff::ParamId {
    store
        .add("x", vec![x.len(), x.channels()], x.features().to_vec())
        .expect("fresh name")
}

fn probe_loss(tape: &mut Tape, y: Var, probe: &[f64]) -> Var {
    let (rows, cols) = (tape.value(y).rows, tape.value(y).cols);
    let p = tape.constant(Mat::new(rows, cols, probe.to_vec()));
    let m = tape.mul(y, p);
    tape.sum(m)
}

fn small_input(rng: &mut impl Rng, grid: [usize; 3], c: usize) -> SparseTensor {
    loop {
        let x = random_sparse(rng, grid, c);
        if x.len() >= 4 {
            return x;
        }
    }
}

fn probe(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sparse convolution (submanifold and strided), gradient w.r.t. input,
/// weights and bias.
pub fn gradcheck_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (kernel, mode) in [
        (Kernel::cube(3), ConvMode::Submanifold),
        (Kernel::new(3, 2, 1), ConvMode::Submanifold),
        (Kernel::new(3, 1, 2), ConvMode::Strided),
    ] {
        let x = small_input(&mut rng, [6, 6, 6], 3);
        let p = random_conv(&mut rng, kernel, mode, 3, 4, true);
        let mut store = ParamStore::new();
        let xi = add_input(&mut store, &x);
        let wi = store.add("w", vec![kernel.volume(), 3, 4], p.weights.clone()).expect("w");
        let bi = store.add("b", vec![4], p.bias.clone().expect("bias")).expect("b");
        let rb = std::sync::Arc::new(build_rulebook(&x, kernel, mode).expect("rulebook"));
        let pr = probe(&mut rng, rb.n_out() * 4);
        worst = worst.max(gradcheck(&store, |tape, s| {
            let xv = tape.param(s, xi);
            let w = tape.param(s, wi);
            let b = tape.param(s, bi);
            let y = tape.conv(xv, w, Some(b), rb.clone());
            probe_loss(tape, y, &pr)
        }));
    }
    worst
}

pub fn gradcheck_dffm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = small_input(&mut rng, [5, 5, 5], 3);
    let spec = decouple_kernel(7).expect("rf 7");
    let p = DffmParams::random(3, &spec, Activation::Silu, 0.5, &mut rng);
    let mut store = ParamStore::new();
    let xi = add_input(&mut store, &x);
    let ids = p.register(&mut store, "dffm").expect("register");
    let pr = probe(&mut rng, x.len() * 3);
    gradcheck(&store, |tape, s| {
        let xv = tape.param(s, xi);
        let mut cache = RulebookCache::new(&x);
        let nodes = dffm_graph(tape, xv, s, &ids, &mut cache).expect("graph");
        probe_loss(tape, nodes.output, &pr)
    })
}

/// Importance head followed by the focal loss against random labels.
pub fn gradcheck_fsm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = small_input(&mut rng, [5, 5, 5], 3);
    let p = FsmParams::random(3, 4, Activation::Silu, 0.5, &mut rng);
    let mut store = ParamStore::new();
    let xi = add_input(&mut store, &x);
    let ids = p.register(&mut store, "fsm").expect("register");
    let labels: std::sync::Arc<[f64]> = (0..x.len()).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
    gradcheck(&store, |tape, s| {
        let xv = tape.param(s, xi);
        let mut cache = RulebookCache::new(&x);
        let logits = fsm_graph(tape, xv, s, &ids, &mut cache).expect("graph");
        tape.focal(logits, labels.clone(), 0.25, 2.0)
    })
}

/// BEV head with the focal + smooth-L1 detection loss.
pub fn gradcheck_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bev = small_input(&mut rng, [6, 6, 1], 3);
    let p = HeadParams::random(3, 4, 1, Activation::Silu, 0.5, &mut rng);
    let mut store = ParamStore::new();
    let xi = add_input(&mut store, &bev);
    let ids = p.register(&mut store, "head").expect("register");
    let geom = GridGeometry {
        origin: [0.0, 0.0, -2.0],
        cell: [1.0, 1.0, 4.0],
    };
    let boxes = [
        Box3D::new([2.0, 2.5, -1.0], [3.0, 1.6, 1.5], 0.3),
        Box3D::new([4.5, 4.0, -1.0], [2.0, 1.5, 1.5], -1.1),
    ];
    let cfg = HeadConfig::default();
    let targets = head_targets(bev.coords(), &geom, &boxes, cfg.z_ref);
    gradcheck(&store, |tape, s| {
        let xv = tape.param(s, xi);
        let mut cache = RulebookCache::new(&bev);
        let (cls, reg) = head_graph(tape, xv, s, &ids, &mut cache).expect("graph");
        detection_loss_graph(tape, cls, reg, &targets, &cfg).total
    })
}

pub fn gradcheck_all(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("sparse_conv", gradcheck_conv(seed)),
        ("dffm", gradcheck_dffm(seed)),
        ("fsm_focal", gradcheck_fsm(seed)),
        ("head_loss", gradcheck_head(seed)),
    ]
}

/// Chebyshev radius of the response to a unit impulse after `n` all-ones
/// 3x3x3 submanifold layers on a dense cube.
pub fn impulse_radius(n: usize) -> u32 {
    let side = 2 * n + 5;
    let center = Coord::new(side as u32 / 2, side as u32 / 2, side as u32 / 2);
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for x in 0..side as u32 {
        for y in 0..side as u32 {
            for z in 0..side as u32 {
                let c = Coord::new(x, y, z);
                coords.push(c);
                feats.push(if c == center { 1.0 } else { 0.0 });
            }
        }
    }
    let mut t = SparseTensor::new([side; 3], 1, coords, feats).expect("cube");
    let mut p = ConvParams::zeros(Kernel::cube(3), ConvMode::Submanifold, 1, 1, false);
    p.weights.iter_mut().for_each(|w| *w = 1.0);
    for _ in 0..n {
        t = sparse_conv(&t, &p).expect("conv");
    }
    oracle::support_radius(&t, center)
}

pub fn random_box(rng: &mut impl Rng, span: f64) -> Box3D {
    Box3D::new(
        [rng.random_range(0.0..span), rng.random_range(0.0..span), rng.random_range(-1.5..-0.5)],
        [rng.random_range(1.0..4.5), rng.random_range(0.8..2.0), rng.random_range(1.2..1.8)],
        rng.random_range(-3.14..3.14),
    )
}

/// Up to `max` boxes over a few classes with distinct scores.
pub fn random_detections(rng: &mut impl Rng, max: usize, span: f64) -> Vec<Detection> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|i| Detection {
            box3d: random_box(rng, span),
            class_id: rng.random_range(0..2),
            score: rng.random_range(0.0..1.0) * 0.999 + i as f64 * 1e-9,
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct NmsCheck {
    pub trials: usize,
    pub failures: usize,
    pub not_idempotent: usize,
    pub overlapping_kept: usize,
}

/// Greedy NMS against the exhaustive fixed-point oracle, plus idempotence
/// and the no-overlap property of the kept set.
pub fn nms_check(trials: usize, seed: u64) -> NmsCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NmsCheck {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let dets = random_detections(&mut rng, 10, 8.0);
        let thr = rng.random_range(0.05..0.7);
        let got = nms_bev(&dets, thr);
        let want = oracle::nms_exhaustive(&dets, thr, |a, b| iou_bev(&a.box3d, &b.box3d));
        if got != want {
            out.failures += 1;
        }
        if nms_bev(&got, thr) != got {
            out.not_idempotent += 1;
            out.failures += 1;
        }
        let overlapping = got.iter().enumerate().any(|(i, a)| {
            got[i + 1..]
                .iter()
                .any(|b| a.class_id == b.class_id && iou_bev(&a.box3d, &b.box3d) > thr)
        });
        if overlapping {
            out.overlapping_kept += 1;
            out.failures += 1;
        }
    }
    out
}

fn random_gt(rng: &mut impl Rng, class: ClassName, b: Box3D) -> GroundTruth {
    let mut g = GroundTruth::from_lidar_box(class, b, rng.random_range(0..=3), &Calib::nominal());
    let top = rng.random_range(100.0..200.0);
    g.bbox2d = [100.0, top, 200.0, top + rng.random_range(15.0..60.0)];
    g.truncated = rng.random_range(0.0..0.6);
    g
}

/// A few frames of ground truth (cars, pedestrians, don't-care regions) and
/// detections scattered around them.
pub fn random_mini_scene(rng: &mut impl Rng) -> Vec<(Vec<Detection>, Vec<GroundTruth>)> {
    let frames = rng.random_range(1..=3);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut gts = Vec::new();
        for _ in 0..rng.random_range(0..=4) {
            let class = match rng.random_range(0..10) {
                0 => ClassName::DontCare,
                1 => ClassName::Pedestrian,
                _ => ClassName::Car,
            };
            let b = random_box(rng, 10.0);
            gts.push(random_gt(rng, class, b));
        }
        let mut dets = Vec::new();
        for g in &gts {
            if rng.random_bool(0.7) {
                let mut b = g.box3d_lidar;
                b.center[0] += rng.random_range(-0.4..0.4);
                b.center[1] += rng.random_range(-0.4..0.4);
                b.yaw += rng.random_range(-0.2..0.2);
                dets.push(Detection {
                    box3d: b,
                    class_id: 0,
                    score: rng.random_range(0.0..1.0),
                });
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            dets.push(Detection {
                box3d: random_box(rng, 10.0),
                class_id: rng.random_range(0..2),
                score: rng.random_range(0.0..1.0),
            });
        }
        out.push((dets, gts));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct ApCheck {
    pub scenes: usize,
    pub evaluated: usize,
    pub max_abs_err: f64,
    pub mismatched: usize,
}

/// Evaluator AP against the brute-force re-matching oracle for every
/// difficulty, alternating BEV and 3D IoU.
pub fn ap_check(scenes: usize, seed: u64) -> ApCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ApCheck {
        scenes,
        ..Default::default()
    };
    for i in 0..scenes {
        let scene = random_mini_scene(&mut rng);
        let cfg = EvalConfig {
            metric: if i % 2 == 0 { IouMetric::Bev } else { IouMetric::ThreeD },
            iou_thresholds: [0.5, 0.5, 0.5],
            ..EvalConfig::default()
        };
        let frames: Vec<FrameRef<'_>> = scene.iter().map(|(d, g)| FrameRef { dets: d, gts: g }).collect();
        for d in Difficulty::BUCKETS {
            let got = average_precision(&frames, ClassName::Car, d, &cfg).ok().map(|c| c.ap);
            let want = oracle::brute_ap(&scene, ClassName::Car, d, &cfg);
            match (got, want) {
                (Some(a), Some(b)) => {
                    out.evaluated += 1;
                    out.max_abs_err = out.max_abs_err.max((a - b).abs());
                }
                (None, None) => {}
                _ => out.mismatched += 1,
            }
        }
    }
    out
}

/// Two easy cars, one detected: recall 1/2 at precision 1 gives AP|R40 = 0.5.
pub fn hand_ap_case() -> f64 {
    let calib = Calib::nominal();
    let mk = |x: f64| {
        let mut g = GroundTruth::from_lidar_box(ClassName::Car, Box3D::new([x, 0.0, -1.0], [4.0, 1.8, 1.5], 0.0), 0, &calib);
        g.bbox2d = [0.0, 100.0, 50.0, 200.0];
        g.truncated = 0.0;
        g
    };
    let gts = vec![mk(10.0), mk(20.0)];
    let dets = vec![Detection {
        box3d: gts[0].box3d_lidar,
        class_id: 0,
        score: 0.9,
    }];
    let frames = [FrameRef { dets: &dets, gts: &gts }];
    average_precision(&frames, ClassName::Car, Difficulty::Easy, &EvalConfig::default())
        .map(|c| c.ap)
        .unwrap_or(f64::NAN)
}
