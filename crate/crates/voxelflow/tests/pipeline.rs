use voxelflow::config::RunConfig;
use voxelflow::pipeline::{dffm_sweep, evaluate_frames, infer, infer_timed, synthetic_suite, train_toy, InferOptions};
use voxelflow_core::detector::Detection;
use voxelflow_core::eval::Difficulty;
use voxelflow_core::model::{Model, Selection};
use voxelflow_core::scene::ClassName;

fn small(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone.channels = [4, 6, 8, 8];
    cfg.fsm.hidden = 4;
    cfg.head.hidden = 6;
    cfg.train.steps = steps;
    cfg
}

#[test]
fn suite_is_seeded() {
    let cfg = small(1);
    let a = synthetic_suite(&cfg.scene, 3).unwrap();
    assert_eq!(a, synthetic_suite(&cfg.scene, 3).unwrap());
    assert_ne!(a[0].0, a[1].0);
}

#[test]
fn short_training_is_reproducible() {
    let mut cfg = small(6);
    cfg.train.scenes = 2;
    let scenes = synthetic_suite(&cfg.scene, 2).unwrap();
    let (m1, r1) = train_toy(&scenes, &cfg).unwrap();
    let (m2, r2) = train_toy(&scenes, &cfg).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(r1.totals()), bits(r2.totals()));
    assert_eq!(m1.store.values(), m2.store.values());
    assert_eq!(r1.steps.len(), 6);
    assert_eq!(r1.steps[1].scene, 1);
}

#[test]
fn augmented_training_is_reproducible() {
    let mut cfg = small(3);
    cfg.train.augment = true;
    let scenes = synthetic_suite(&cfg.scene, 2).unwrap();
    let (_, r1) = train_toy(&scenes, &cfg).unwrap();
    let (_, r2) = train_toy(&scenes, &cfg).unwrap();
    assert_eq!(r1.totals(), r2.totals());
}

#[test]
fn divergence_is_reported() {
    let mut cfg = small(40);
    cfg.train.lr = 1e200;
    let scenes = synthetic_suite(&cfg.scene, 1).unwrap();
    let e = train_toy(&scenes, &cfg).unwrap_err();
    assert_eq!(e.kind(), "DivergedLoss");
}

#[test]
fn timed_and_parallel_inference_agree() {
    let cfg = small(1);
    let m = Model::new(cfg.model()).unwrap();
    let frames: Vec<_> = synthetic_suite(&cfg.scene, 4).unwrap().into_iter().map(|s| s.0).collect();
    for sel in [Selection::Full, Selection::Importance, Selection::RandomMask { fraction: 0.5, seed: 3 }] {
        let par = infer(&m, &frames, sel).unwrap();
        let (ser, report) = infer_timed(&m, &frames, &InferOptions { repeats: 2, ..InferOptions::new(sel) }).unwrap();
        assert_eq!(par, ser);
        assert_eq!(report.per_frame.len(), 4);
        assert!(report.per_frame.iter().all(|f| f.total_ms > 0.0 && f.phases.sum() > 0.0));
    }
}

#[test]
fn importance_halves_head_sites_per_frame() {
    let cfg = small(1);
    let m = Model::new(cfg.model()).unwrap();
    let frames: Vec<_> = synthetic_suite(&cfg.scene, 5).unwrap().into_iter().map(|s| s.0).collect();
    let opts = |sel| InferOptions { warmup: 0, ..InferOptions::new(sel) };
    let (_, full) = infer_timed(&m, &frames, &opts(Selection::Full)).unwrap();
    let (_, half) = infer_timed(&m, &frames, &opts(Selection::Importance)).unwrap();
    for (a, b) in full.per_frame.iter().zip(&half.per_frame) {
        assert_eq!(b.head_sites, a.head_sites.div_ceil(2));
    }
}

#[test]
fn evaluation_of_perfect_and_empty_detections() {
    let cfg = small(1);
    let scenes = synthetic_suite(&cfg.scene, 6).unwrap();
    let gts: Vec<_> = scenes.iter().map(|s| s.1.clone()).collect();
    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(i, g)| Detection { box3d: g.box3d_lidar, class_id: 0, score: 0.9 - 0.01 * i as f64 })
                .collect()
        })
        .collect();
    let r = evaluate_frames(&perfect, &gts, &cfg.eval);
    let empty = evaluate_frames(&vec![Vec::new(); gts.len()], &gts, &cfg.eval);
    for d in Difficulty::BUCKETS {
        if let Some(ap) = r.ap(ClassName::Car, d) {
            assert_eq!(ap, 1.0);
            assert_eq!(empty.ap(ClassName::Car, d), Some(0.0));
        }
    }
}

#[test]
fn dffm_sweep_yields_four_results() {
    let mut cfg = small(2);
    cfg.backbone.fsm = false;
    let scenes = synthetic_suite(&cfg.scene, 1).unwrap();
    let sweep = dffm_sweep(&scenes, &scenes, &cfg).unwrap();
    assert_eq!(sweep.iter().map(|e| e.dffm_stages.clone()).collect::<Vec<_>>(), vec![vec![1], vec![2], vec![3], vec![4]]);
}
