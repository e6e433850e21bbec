//! Rotated-box IoU, KITTI difficulty buckets and recall-sampled average
//! precision.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{bev_intersection, Box3D};
use crate::scene::{ClassName, GroundTruth};

/// BEV IoU of two yaw-rotated boxes via convex polygon clipping.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection times vertical overlap, over the volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const BUCKETS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
            Difficulty::Ignored => "Ignored",
        }
    }
}

/// Thresholds of one difficulty bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRule {
    pub min_height_px: f64,
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMetric {
    Bev,
    #[default]
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallPoints {
    /// `{1/40, ..., 40/40}`
    #[default]
    R40,
    /// `{0, 1/10, ..., 10/10}`
    R11,
}

impl RecallPoints {
    pub fn points(self) -> Vec<f64> {
        match self {
            RecallPoints::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
            RecallPoints::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU threshold per class: Car, Pedestrian, Cyclist.
    pub iou_thresholds: [f64; 3],
    pub metric: IouMetric,
    pub recall_points: RecallPoints,
    /// Easy, Moderate, Hard.
    pub difficulty_rules: [DifficultyRule; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: [0.7, 0.5, 0.5],
            metric: IouMetric::ThreeD,
            recall_points: RecallPoints::R40,
            difficulty_rules: [
                DifficultyRule {
                    min_height_px: 40.0,
                    max_occlusion: 0,
                    max_truncation: 0.15,
                },
                DifficultyRule {
                    min_height_px: 25.0,
                    max_occlusion: 1,
                    max_truncation: 0.30,
                },
                DifficultyRule {
                    min_height_px: 25.0,
                    max_occlusion: 2,
                    max_truncation: 0.50,
                },
            ],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config(String::from("IoU thresholds must lie in (0, 1)")));
        }
        Ok(())
    }

    pub fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self.metric {
            IouMetric::Bev => iou_bev(a, b),
            IouMetric::ThreeD => iou_3d(a, b),
        }
    }
}

/// Strictest bucket whose three thresholds all pass; `Ignored` if none.
pub fn assign_difficulty(gt: &GroundTruth, cfg: &EvalConfig) -> Difficulty {
    let h = gt.bbox_height();
    for (rule, d) in cfg.difficulty_rules.iter().zip(Difficulty::BUCKETS) {
        if h >= rule.min_height_px && gt.occluded <= rule.max_occlusion && gt.truncated <= rule.max_truncation {
            return d;
        }
    }
    Difficulty::Ignored
}

/// Detections and annotations of one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub dets: &'a [Detection],
    pub gts: &'a [GroundTruth],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GtRole {
    Valid,
    Ignored,
    Unrelated,
}

fn gt_role(gt: &GroundTruth, class: ClassName, difficulty: Difficulty, cfg: &EvalConfig) -> GtRole {
    if gt.class_name == ClassName::DontCare {
        return GtRole::Ignored;
    }
    if gt.class_name != class {
        return GtRole::Unrelated;
    }
    let d = assign_difficulty(gt, cfg);
    if d != Difficulty::Ignored && d <= difficulty {
        GtRole::Valid
    } else {
        GtRole::Ignored
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Neutral,
}

/// Greedy score-descending matching within one frame. Returns each
/// detection's score and outcome.
fn match_frame(
    frame: &FrameRef<'_>,
    class: ClassName,
    difficulty: Difficulty,
    cfg: &EvalConfig,
) -> (Vec<(f64, Outcome)>, usize) {
    let class_id = class.class_id();
    let roles: Vec<GtRole> = frame.gts.iter().map(|g| gt_role(g, class, difficulty, cfg)).collect();
    let n_valid = roles.iter().filter(|&&r| r == GtRole::Valid).count();
    let thr = class_id.map(|c| cfg.iou_thresholds[c]).unwrap_or(0.5);
    let mut dets: Vec<&Detection> = frame.dets.iter().filter(|d| Some(d.class_id) == class_id).collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; frame.gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, g) in frame.gts.iter().enumerate() {
            if roles[j] == GtRole::Unrelated {
                continue;
            }
            let iou = cfg.iou(&d.box3d, &g.box3d_lidar);
            if iou < thr {
                continue;
            }
            match roles[j] {
                GtRole::Valid if !taken[j] => {
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                GtRole::Ignored => hits_ignored = true,
                _ => {}
            }
        }
        let outcome = if let Some((j, _)) = best {
            taken[j] = true;
            Outcome::Tp
        } else if hits_ignored {
            Outcome::Neutral
        } else {
            Outcome::Fp
        };
        out.push((d.score, outcome));
    }
    (out, n_valid)
}

/// Precision/recall sequence and the recall-sampled AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCurve {
    pub ap: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Recall-sampled AP over a set of frames. `NoGroundTruth` when the
/// class/difficulty bucket has no valid annotation.
pub fn average_precision(frames: &[FrameRef<'_>], class: ClassName, difficulty: Difficulty, cfg: &EvalConfig) -> Result<ApCurve> {
    let mut all: Vec<(f64, Outcome)> = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let (m, n) = match_frame(f, class, difficulty, cfg);
        all.extend(m);
        n_gt += n;
    }
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    // stable: equal scores keep frame order
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for (_, o) in all {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Neutral => continue,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let ap = smoothed_ap(&precision, &recall, &cfg.recall_points.points());
    Ok(ApCurve { ap, precision, recall })
}

/// Mean over `points` of the best precision achieved at recall >= r (0 when unreachable).
pub fn smoothed_ap(precision: &[f64], recall: &[f64], points: &[f64]) -> f64 {
    // suffix maximum of precision, scanned right to left
    let mut suffix = vec![0.0f64; precision.len() + 1];
    for i in (0..precision.len()).rev() {
        suffix[i] = suffix[i + 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for &r in points {
        let first = recall.partition_point(|&x| x < r);
        sum += suffix[first];
    }
    sum / points.len() as f64
}

/// AP with the 40 recall points `{1/40, ..., 1}`.
pub fn ap_r40(frames: &[FrameRef<'_>], class: ClassName, difficulty: Difficulty, cfg: &EvalConfig) -> Result<f64> {
    let cfg = EvalConfig {
        recall_points: RecallPoints::R40,
        ..cfg.clone()
    };
    average_precision(frames, class, difficulty, &cfg).map(|c| c.ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub class: ClassName,
    pub difficulty: Difficulty,
    /// `None` when the bucket has no ground truth.
    pub ap: Option<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: IouMetric,
    pub recall_points: RecallPoints,
    pub entries: Vec<EvalEntry>,
}

impl EvalResult {
    pub fn ap(&self, class: ClassName, difficulty: Difficulty) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.difficulty == difficulty)
            .and_then(|e| e.ap)
    }

    /// Text table with Easy / Mod. / Hard columns, AP in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8}", "Class", "Easy", "Mod.", "Hard");
        let mut classes: Vec<ClassName> = self.entries.iter().map(|e| e.class).collect();
        classes.dedup();
        for c in classes {
            let _ = write!(s, "{:<12}", c.as_str());
            for d in Difficulty::BUCKETS {
                let cell = match self.ap(c, d) {
                    Some(v) => format!("{:.2}", v * 100.0),
                    None => String::from("-"),
                };
                let _ = write!(s, " {cell:>8}");
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates every requested class at all three difficulties.
pub fn evaluate(frames: &[FrameRef<'_>], classes: &[ClassName], cfg: &EvalConfig) -> EvalResult {
    let mut entries = Vec::new();
    for &class in classes {
        for d in Difficulty::BUCKETS {
            let entry = match average_precision(frames, class, d, cfg) {
                Ok(c) => EvalEntry {
                    class,
                    difficulty: d,
                    ap: Some(c.ap),
                    precision: c.precision,
                    recall: c.recall,
                },
                Err(_) => EvalEntry {
                    class,
                    difficulty: d,
                    ap: None,
                    precision: Vec::new(),
                    recall: Vec::new(),
                },
            };
            entries.push(entry);
        }
    }
    EvalResult {
        metric: cfg.metric,
        recall_points: cfg.recall_points,
        entries,
    }
}
