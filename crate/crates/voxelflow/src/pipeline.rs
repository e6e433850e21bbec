//! Training, timed inference and evaluation on synthetic scenes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxelflow_core::detector::{count_candidates, Detection};
use voxelflow_core::eval::{evaluate, EvalConfig, EvalResult, FrameRef};
use voxelflow_core::model::{Model, Selection, StepLosses};
use voxelflow_core::scene::{gen_synthetic_scene, ClassName, GroundTruth, PointCloud, SceneConfig};
use voxelflow_core::voxel::{augment, build_gt_database, crop_points, gt_sample, voxelize, VoxelConfig, Voxelized};
use voxelflow_core::Box3D;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// A point cloud and its annotations.
pub type Scene = (PointCloud, Vec<GroundTruth>);

/// `n` scenes with seeds `base.seed, base.seed + 1, ...`.
pub fn synthetic_suite(base: &SceneConfig, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64)
        .map(|i| {
            let cfg = SceneConfig {
                seed: base.seed.wrapping_add(i),
                ..base.clone()
            };
            Ok(gen_synthetic_scene(&cfg)?)
        })
        .collect()
}

/// LiDAR boxes of the annotations the detector is trained on.
pub fn car_boxes(gts: &[GroundTruth]) -> Vec<Box3D> {
    gts.iter().filter(|g| g.class_name == ClassName::Car).map(|g| g.box3d_lidar).collect()
}

pub fn voxelize_frame(pc: &PointCloud, cfg: &VoxelConfig) -> Result<Voxelized> {
    Ok(voxelize(&crop_points(pc, cfg), cfg)?)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scene: usize,
    pub total: f64,
    pub detection: f64,
    pub cls: f64,
    pub reg: f64,
    pub importance: f64,
}

impl StepRecord {
    fn new(step: usize, scene: usize, l: StepLosses) -> Self {
        StepRecord {
            step,
            scene,
            total: l.total,
            detection: l.detection,
            cls: l.cls,
            reg: l.reg,
            importance: l.importance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPhases {
    /// Augmentation and voxelization.
    pub data_ms: f64,
    /// Forward, backward and the optimizer update.
    pub step_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub initial_total: f64,
    pub final_total: f64,
    pub final_over_initial: f64,
    pub wall_ms: f64,
    pub phases: TrainPhases,
    /// Evaluation on the training scenes after the last step.
    pub final_metrics: EvalResult,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

pub fn train_toy(scenes: &[Scene], cfg: &RunConfig) -> Result<(Model, TrainReport)> {
    train_toy_with(scenes, cfg, |_| {})
}

/// Adam on `detection + lambda_imp * importance`, visiting `scenes` round
/// robin. `on_step` sees every record as it is produced.
pub fn train_toy_with(scenes: &[Scene], cfg: &RunConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<(Model, TrainReport)> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::new(cfg.model())?;
    let mut opt = model.optimizer(cfg.train.lr, cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let db = if cfg.train.augment { build_gt_database(scenes) } else { Vec::new() };
    let mut cached: Vec<Option<(Voxelized, Vec<Box3D>)>> = vec![None; scenes.len()];
    let (mut data_ms, mut step_ms) = (0.0, 0.0);
    let mut steps = Vec::with_capacity(cfg.train.steps);

    for step in 0..cfg.train.steps {
        let i = step % scenes.len();
        let t = Instant::now();
        let fresh;
        let (vox, boxes) = if cfg.train.augment {
            let (pc, gts) = &scenes[i];
            let (pc, gts) = gt_sample(pc, gts, &db, &mut rng, &cfg.augment, &cfg.voxel);
            let (pc, gts) = augment(&pc, &gts, &mut rng, &cfg.augment);
            fresh = (voxelize_frame(&pc, &cfg.voxel)?, car_boxes(&gts));
            (&fresh.0, &fresh.1)
        } else {
            if cached[i].is_none() {
                let (pc, gts) = &scenes[i];
                cached[i] = Some((voxelize_frame(pc, &cfg.voxel)?, car_boxes(gts)));
            }
            let c = cached[i].as_ref().expect("filled above");
            (&c.0, &c.1)
        };
        data_ms += ms(t);

        let t = Instant::now();
        let losses = model.train_step(&mut opt, &vox.tensor, boxes, step)?;
        step_ms += ms(t);
        let rec = StepRecord::new(step, i, losses);
        on_step(&rec);
        steps.push(rec);
    }

    let t = Instant::now();
    let frames: Vec<PointCloud> = scenes.iter().map(|s| s.0.clone()).collect();
    let dets = infer(&model, &frames, model.default_selection())?;
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.1.clone()).collect();
    let final_metrics = evaluate_frames(&dets, &gts, &cfg.eval);
    let eval_ms = ms(t);

    let initial_total = steps.first().map(|s| s.total).unwrap_or(0.0);
    let final_total = steps.last().map(|s| s.total).unwrap_or(0.0);
    let report = TrainReport {
        final_over_initial: if initial_total > 0.0 { final_total / initial_total } else { 1.0 },
        initial_total,
        final_total,
        steps,
        wall_ms: ms(start),
        phases: TrainPhases {
            data_ms,
            step_ms,
            eval_ms,
        },
        final_metrics,
    };
    Ok((model, report))
}

/// Detections for one frame.
pub fn detect(model: &Model, pc: &PointCloud, selection: Selection) -> Result<Vec<Detection>> {
    let vox = voxelize_frame(pc, &model.cfg.voxel)?;
    let (_, out) = model.forward(&vox.tensor, selection)?;
    Ok(model.postprocess(&out))
}

/// Untimed inference, frames in parallel.
pub fn infer(model: &Model, frames: &[PointCloud], selection: Selection) -> Result<Vec<Vec<Detection>>> {
    frames.par_iter().map(|pc| detect(model, pc, selection)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub selection: Selection,
    /// Untimed passes over the first frames before measuring.
    pub warmup: usize,
    /// Runs per frame; each phase keeps its fastest run.
    pub repeats: usize,
}

impl InferOptions {
    pub fn new(selection: Selection) -> Self {
        InferOptions {
            selection,
            warmup: 3,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub voxelize_ms: f64,
    pub backbone_ms: f64,
    pub fsm_ms: f64,
    pub head_nms_ms: f64,
}

impl PhaseTimes {
    pub fn sum(&self) -> f64 {
        self.voxelize_ms + self.backbone_ms + self.fsm_ms + self.head_nms_ms
    }

    fn min(&mut self, o: &PhaseTimes) {
        self.voxelize_ms = self.voxelize_ms.min(o.voxelize_ms);
        self.backbone_ms = self.backbone_ms.min(o.backbone_ms);
        self.fsm_ms = self.fsm_ms.min(o.fsm_ms);
        self.head_nms_ms = self.head_nms_ms.min(o.head_nms_ms);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub phases: PhaseTimes,
    pub total_ms: f64,
    pub voxels: usize,
    /// Sites entering the detection head.
    pub head_sites: usize,
    /// Scores at or above the threshold before NMS.
    pub candidates: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub mean_phases: PhaseTimes,
    pub per_frame: Vec<FrameTiming>,
}

fn run_timed(model: &Model, pc: &PointCloud, selection: Selection) -> Result<(Vec<Detection>, FrameTiming)> {
    let all = Instant::now();
    let t = Instant::now();
    let vox = voxelize_frame(pc, &model.cfg.voxel)?;
    let voxelize_ms = ms(t);

    let t = Instant::now();
    let mut pass = model.begin(&vox.tensor)?;
    model.run_backbone(&mut pass)?;
    let backbone_ms = ms(t);

    let t = Instant::now();
    model.run_selection(&mut pass, selection)?;
    let fsm_ms = ms(t);

    let t = Instant::now();
    let out = model.run_head(&mut pass)?;
    let dets = model.postprocess(&out);
    let head_nms_ms = ms(t);
    let total_ms = ms(all);

    let timing = FrameTiming {
        phases: PhaseTimes {
            voxelize_ms,
            backbone_ms,
            fsm_ms,
            head_nms_ms,
        },
        total_ms,
        voxels: vox.tensor.len(),
        head_sites: pass.head_sites(),
        candidates: count_candidates(&out, model.cfg.head.score_threshold),
        detections: dets.len(),
    };
    Ok((dets, timing))
}

/// Serial, timed inference. Frames are measured one at a time after
/// `warmup` untimed runs.
pub fn infer_timed(model: &Model, frames: &[PointCloud], opts: &InferOptions) -> Result<(Vec<Vec<Detection>>, TimingReport)> {
    for pc in frames.iter().cycle().take(opts.warmup) {
        run_timed(model, pc, opts.selection)?;
    }
    let repeats = opts.repeats.max(1);
    let mut dets = Vec::with_capacity(frames.len());
    let mut per_frame = Vec::with_capacity(frames.len());
    for pc in frames {
        let (d, mut best) = run_timed(model, pc, opts.selection)?;
        for _ in 1..repeats {
            let (_, t) = run_timed(model, pc, opts.selection)?;
            best.phases.min(&t.phases);
            best.total_ms = best.total_ms.min(t.total_ms);
        }
        dets.push(d);
        per_frame.push(best);
    }
    let n = per_frame.len();
    let mut mean = PhaseTimes::default();
    let mut mean_ms = 0.0;
    if n > 0 {
        for f in &per_frame {
            mean.voxelize_ms += f.phases.voxelize_ms;
            mean.backbone_ms += f.phases.backbone_ms;
            mean.fsm_ms += f.phases.fsm_ms;
            mean.head_nms_ms += f.phases.head_nms_ms;
            mean_ms += f.total_ms;
        }
        let k = n as f64;
        mean.voxelize_ms /= k;
        mean.backbone_ms /= k;
        mean.fsm_ms /= k;
        mean.head_nms_ms /= k;
        mean_ms /= k;
    }
    let report = TimingReport {
        frames: n,
        warmup: opts.warmup,
        repeats,
        mean_ms,
        mean_phases: mean,
        per_frame,
    };
    Ok((dets, report))
}

/// Car AP over matched frame lists.
pub fn evaluate_frames(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> EvalResult {
    let frames: Vec<FrameRef<'_>> = dets.iter().zip(gts).map(|(d, g)| FrameRef { dets: d, gts: g }).collect();
    evaluate(&frames, &[ClassName::Car], cfg)
}

/// Inference plus evaluation on a scene list.
pub fn evaluate_suite(model: &Model, scenes: &[Scene], selection: Selection, cfg: &EvalConfig) -> Result<EvalResult> {
    let frames: Vec<PointCloud> = scenes.iter().map(|s| s.0.clone()).collect();
    let dets = infer(model, &frames, selection)?;
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.1.clone()).collect();
    Ok(evaluate_frames(&dets, &gts, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub dffm_stages: Vec<usize>,
    pub final_total: f64,
    pub result: EvalResult,
}

/// One training run per single-stage fusion placement, each evaluated on `eval`.
pub fn dffm_sweep(train: &[Scene], eval: &[Scene], cfg: &RunConfig) -> Result<Vec<SweepEntry>> {
    let mut out = Vec::with_capacity(4);
    for stage in 1..=4 {
        let mut c = cfg.clone();
        c.dffm.stages = vec![stage];
        let (model, report) = train_toy(train, &c)?;
        let result = evaluate_suite(&model, eval, model.default_selection(), &c.eval)?;
        out.push(SweepEntry {
            dffm_stages: vec![stage],
            final_total: report.final_total,
            result,
        });
    }
    Ok(out)
}
