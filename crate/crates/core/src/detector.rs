//! Anchor-free BEV detection head, box coding, rotated NMS and the
//! detection loss.
//!
//! The head runs on the active cells of a BEV sparse tensor (grid `[nx, ny, 1]`)
//! with planar 3x3 kernels. A dense map is the special case where every cell
//! is active, see [`SparseTensor::from_dense_full`].

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mat, ParamId, ParamStore, Tape, Var};
use crate::conv::ConvParams;
use crate::dffm::conv_shape;
use crate::error::{Error, Result};
use crate::eval::iou_bev;
use crate::geometry::Box3D;
use crate::math::{atan2, cos, exp, ln, sigmoid, sin};
use crate::rulebook::{ConvMode, Kernel, RulebookCache};
use crate::sparse::{Coord, SparseTensor};
use crate::voxel::GridGeometry;

/// Regression channels: `dx, dy, dz, log l, log w, log h, sin yaw, cos yaw`.
pub const REG_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub box3d: Box3D,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Reference height the `dz` channel is measured from.
    pub z_ref: f64,
    /// Initial classification bias, about `logit(0.01)`.
    pub cls_prior: f64,
    pub reg_weight: f64,
    pub smooth_l1_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 32,
            score_threshold: 0.3,
            nms_iou: 0.1,
            z_ref: -0.85,
            cls_prior: -4.6,
            reg_weight: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config(format!("head hidden width must be positive")));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("score_threshold and nms_iou must lie in [0, 1]")));
        }
        if !(self.smooth_l1_beta > 0.0) || !(self.reg_weight >= 0.0) {
            return Err(Error::Config(format!("smooth_l1_beta must be positive and reg_weight nonnegative")));
        }
        Ok(())
    }
}

/// Two parallel two-layer stacks: planar 3x3 `c -> h`, activation, 1x1 to
/// the output width.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls_hidden: ConvParams,
    pub cls_out: ConvParams,
    pub reg_hidden: ConvParams,
    pub reg_out: ConvParams,
    pub activation: Activation,
}

impl HeadParams {
    pub fn zeros(channels: usize, hidden: usize, classes: usize, activation: Activation) -> Self {
        let sm = ConvMode::Submanifold;
        HeadParams {
            cls_hidden: ConvParams::zeros(Kernel::planar(3), sm, channels, hidden, true),
            cls_out: ConvParams::zeros(Kernel::cube(1), sm, hidden, classes, true),
            reg_hidden: ConvParams::zeros(Kernel::planar(3), sm, channels, hidden, true),
            reg_out: ConvParams::zeros(Kernel::cube(1), sm, hidden, REG_CHANNELS, true),
            activation,
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, hidden: usize, classes: usize, activation: Activation, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, hidden, classes, activation);
        for c in p.layers_mut() {
            c.weights.iter_mut().for_each(|w| *w = rng.random_range(-scale..=scale));
            if let Some(b) = c.bias.as_mut() {
                b.iter_mut().for_each(|w| *w = rng.random_range(-scale..=scale));
            }
        }
        p
    }

    fn layers_mut(&mut self) -> [&mut ConvParams; 4] {
        [&mut self.cls_hidden, &mut self.cls_out, &mut self.reg_hidden, &mut self.reg_out]
    }

    pub fn classes(&self) -> usize {
        self.cls_out.c_out
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for c in [&self.cls_hidden, &self.cls_out, &self.reg_hidden, &self.reg_out] {
            c.validate()?;
            if c.mode != ConvMode::Submanifold || c.bias.is_none() {
                return Err(Error::InvalidKernel("head layers are biased submanifold convolutions"));
            }
        }
        for h in [&self.cls_hidden, &self.reg_hidden] {
            if h.c_in != channels {
                return Err(Error::ShapeMismatch {
                    what: "head input channels",
                    expected: h.c_in,
                    got: channels,
                });
            }
        }
        if self.cls_out.c_in != self.cls_hidden.c_out || self.reg_out.c_in != self.reg_hidden.c_out {
            return Err(Error::ShapeMismatch {
                what: "head hidden width",
                expected: self.cls_hidden.c_out,
                got: self.cls_out.c_in,
            });
        }
        if self.reg_out.c_out != REG_CHANNELS {
            return Err(Error::ShapeMismatch {
                what: "regression channels",
                expected: REG_CHANNELS,
                got: self.reg_out.c_out,
            });
        }
        Ok(())
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<HeadIds> {
        let mut add = |name: &str, c: &ConvParams| -> Result<(ParamId, ParamId)> {
            let w = store.add(format!("{prefix}.{name}.w"), conv_shape(c), c.weights.clone())?;
            let b = store.add(format!("{prefix}.{name}.b"), alloc::vec![c.c_out], c.bias.clone().unwrap_or_default())?;
            Ok((w, b))
        };
        Ok(HeadIds {
            activation: self.activation,
            hidden_kernel: self.cls_hidden.kernel,
            cls_hidden: add("cls_hidden", &self.cls_hidden)?,
            cls_out: add("cls_out", &self.cls_out)?,
            reg_hidden: add("reg_hidden", &self.reg_hidden)?,
            reg_out: add("reg_out", &self.reg_out)?,
        })
    }

    pub fn from_store(store: &ParamStore, ids: &HeadIds) -> Self {
        let shape = store.shape(ids.cls_hidden.0);
        let classes = store.shape(ids.cls_out.0)[2];
        let mut p = Self::zeros(shape[1], shape[2], classes, ids.activation);
        p.cls_hidden.kernel = ids.hidden_kernel;
        p.reg_hidden.kernel = ids.hidden_kernel;
        let pairs = [ids.cls_hidden, ids.cls_out, ids.reg_hidden, ids.reg_out];
        for (c, (w, b)) in p.layers_mut().into_iter().zip(pairs) {
            c.weights = store.get(w).to_vec();
            c.bias = Some(store.get(b).to_vec());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadIds {
    pub activation: Activation,
    pub hidden_kernel: Kernel,
    pub cls_hidden: (ParamId, ParamId),
    pub cls_out: (ParamId, ParamId),
    pub reg_hidden: (ParamId, ParamId),
    pub reg_out: (ParamId, ParamId),
}

/// Records the head and returns `(logits rows x classes, regression rows x 8)`.
pub fn head_graph(tape: &mut Tape, x: Var, store: &ParamStore, ids: &HeadIds, cache: &mut RulebookCache) -> Result<(Var, Var)> {
    let rb_h = cache.get(ids.hidden_kernel, ConvMode::Submanifold)?;
    let rb_1 = cache.get(Kernel::cube(1), ConvMode::Submanifold)?;
    let branch = |tape: &mut Tape, hidden: (ParamId, ParamId), out: (ParamId, ParamId)| {
        let w = tape.param(store, hidden.0);
        let b = tape.param(store, hidden.1);
        let h = tape.conv(x, w, Some(b), rb_h.clone());
        let h = tape.activate(h, ids.activation);
        let w = tape.param(store, out.0);
        let b = tape.param(store, out.1);
        tape.conv(h, w, Some(b), rb_1.clone())
    };
    let cls = branch(tape, ids.cls_hidden, ids.cls_out);
    let reg = branch(tape, ids.reg_hidden, ids.reg_out);
    Ok((cls, reg))
}

/// Per-cell head outputs, rows aligned with `coords`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub coords: Vec<Coord>,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub reg: Vec<f64>,
}

impl HeadOutput {
    pub fn scores(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn head_forward(bev: &SparseTensor, p: &HeadParams) -> Result<HeadOutput> {
    p.validate(bev.channels())?;
    if bev.grid()[2] != 1 {
        return Err(Error::ShapeMismatch {
            what: "BEV grid depth",
            expected: 1,
            got: bev.grid()[2],
        });
    }
    if bev.is_empty() {
        return Ok(HeadOutput {
            coords: Vec::new(),
            classes: p.classes(),
            logits: Vec::new(),
            reg: Vec::new(),
        });
    }
    let mut store = ParamStore::new();
    let ids = p.register(&mut store, "head")?;
    let mut tape = Tape::new();
    let x = tape.constant(Mat::new(bev.len(), bev.channels(), bev.features().to_vec()));
    let mut cache = RulebookCache::new(bev);
    let (cls, reg) = head_graph(&mut tape, x, &store, &ids, &mut cache)?;
    Ok(HeadOutput {
        coords: bev.coords().to_vec(),
        classes: p.classes(),
        logits: tape.value(cls).data.clone(),
        reg: tape.value(reg).data.clone(),
    })
}

/// Regression target of box `b` seen from a cell centered at `(cx, cy)`.
pub fn encode_box(b: &Box3D, cx: f64, cy: f64, z_ref: f64) -> [f64; REG_CHANNELS] {
    [
        b.center[0] - cx,
        b.center[1] - cy,
        b.center[2] - z_ref,
        ln(b.dims[0]),
        ln(b.dims[1]),
        ln(b.dims[2]),
        sin(b.yaw),
        cos(b.yaw),
    ]
}

pub fn decode_box(r: &[f64], cx: f64, cy: f64, z_ref: f64) -> Box3D {
    Box3D::new(
        [cx + r[0], cy + r[1], z_ref + r[2]],
        [exp(r[3]), exp(r[4]), exp(r[5])],
        atan2(r[6], r[7]),
    )
}

/// Boxes for every `(cell, class)` whose score reaches `threshold`, highest
/// score first (ties keep cell order).
pub fn decode_boxes(out: &HeadOutput, threshold: f64, geom: &GridGeometry, z_ref: f64) -> Vec<Detection> {
    let k = out.classes;
    let mut dets = Vec::new();
    for (row, &c) in out.coords.iter().enumerate() {
        let center = geom.center(c);
        for class_id in 0..k {
            let score = sigmoid(out.logits[row * k + class_id]);
            if score >= threshold {
                let r = &out.reg[row * REG_CHANNELS..(row + 1) * REG_CHANNELS];
                dets.push(Detection {
                    box3d: decode_box(r, center[0], center[1], z_ref),
                    class_id,
                    score,
                });
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets
}

/// Number of `(cell, class)` scores at or above `threshold`.
pub fn count_candidates(out: &HeadOutput, threshold: f64) -> usize {
    out.logits.iter().filter(|&&z| sigmoid(z) >= threshold).count()
}

/// Greedy rotated-BEV NMS, independent per class. The result is sorted by
/// descending score.
pub fn nms_bev(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_bev(&k.box3d, &d.box3d) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Per-cell supervision: objectness labels and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub labels: Vec<f64>,
    pub reg: Vec<f64>,
    pub positive: Vec<f64>,
    pub num_positive: usize,
}

/// A cell is positive when its center lies in a box footprint; the first
/// such box provides the regression target.
pub fn head_targets(coords: &[Coord], geom: &GridGeometry, boxes: &[Box3D], z_ref: f64) -> HeadTargets {
    let n = coords.len();
    let mut t = HeadTargets {
        labels: alloc::vec![0.0; n],
        reg: alloc::vec![0.0; n * REG_CHANNELS],
        positive: alloc::vec![0.0; n],
        num_positive: 0,
    };
    for (row, &c) in coords.iter().enumerate() {
        let p = geom.center(c);
        if let Some(b) = boxes.iter().find(|b| b.contains_bev(p[0], p[1])) {
            t.labels[row] = 1.0;
            t.positive[row] = 1.0;
            t.num_positive += 1;
            t.reg[row * REG_CHANNELS..(row + 1) * REG_CHANNELS].copy_from_slice(&encode_box(b, p[0], p[1], z_ref));
        }
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `focal(cls) + reg_weight * smoothL1(reg)`, with the regression term summed
/// over channels and averaged over positive cells. Single-class logits.
pub fn detection_loss_graph(tape: &mut Tape, cls: Var, reg: Var, targets: &HeadTargets, cfg: &HeadConfig) -> LossNodes {
    let labels: Arc<[f64]> = targets.labels.clone().into();
    let cls_loss = tape.focal(cls, labels, cfg.focal_alpha, cfg.focal_gamma);
    let norm = targets.num_positive.max(1) as f64;
    let reg_loss = tape.smooth_l1(reg, targets.reg.clone().into(), targets.positive.clone().into(), cfg.smooth_l1_beta, norm);
    let weighted = tape.scale(reg_loss, cfg.reg_weight);
    let total = tape.add(cls_loss, weighted);
    LossNodes {
        total,
        cls: cls_loss,
        reg: reg_loss,
    }
}

/// Loss values of a finished head pass.
pub fn detection_loss(out: &HeadOutput, gts: &[Box3D], geom: &GridGeometry, cfg: &HeadConfig) -> Result<f64> {
    if out.classes != 1 {
        return Err(Error::ShapeMismatch {
            what: "classes in detection loss",
            expected: 1,
            got: out.classes,
        });
    }
    let targets = head_targets(&out.coords, geom, gts, cfg.z_ref);
    let mut tape = Tape::new();
    let n = out.len();
    let cls = tape.constant(Mat::new(n, 1, out.logits.clone()));
    let reg = tape.constant(Mat::new(n, REG_CHANNELS, out.reg.clone()));
    let nodes = detection_loss_graph(&mut tape, cls, reg, &targets, cfg);
    Ok(tape.value(nodes.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::PI;
    use crate::sparse::DenseGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> GridGeometry {
        GridGeometry {
            origin: [0.0, 0.0, -2.0],
            cell: [1.0, 1.0, 4.0],
        }
    }

    fn dense_bev(n: usize, c: usize, rng: &mut ChaCha8Rng) -> SparseTensor {
        let mut d = DenseGrid::zeros([n, n, 1], c);
        d.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        SparseTensor::from_dense_full(&d)
    }

    #[test]
    fn zero_head_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bev = dense_bev(4, 3, &mut rng);
        let out = head_forward(&bev, &HeadParams::zeros(3, 5, 1, Activation::Silu)).unwrap();
        assert!(out.scores().iter().all(|&s| s == 0.5));
        assert!(out.reg.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn decode_single_hot_cell() {
        let out = HeadOutput {
            coords: alloc::vec![Coord::new(2, 3, 0), Coord::new(0, 0, 0)],
            classes: 1,
            logits: alloc::vec![3.0, -3.0],
            reg: alloc::vec![0.0; 16],
        };
        let d = decode_boxes(&out, 0.5, &geom(), -1.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].box3d.center, [2.5, 3.5, -1.0]);
        assert_eq!(d[0].box3d.dims, [1.0; 3]);
        assert_eq!(d[0].box3d.yaw, 0.0);
        assert!(decode_boxes(&out, 0.99, &geom(), -1.0).is_empty());
    }

    #[test]
    fn decode_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 30;
        let out = HeadOutput {
            coords: (0..n).map(|i| Coord::new(i, 0, 0)).collect(),
            classes: 1,
            logits: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            reg: (0..n * 8).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let d = decode_boxes(&out, 0.0, &geom(), 0.0);
        assert_eq!(d.len(), n as usize);
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn encode_decode_identity() {
        let b = Box3D::new([3.2, -1.7, -0.6], [4.1, 1.7, 1.5], 2.2);
        let r = encode_box(&b, 3.0, -2.0, -0.85);
        let d = decode_box(&r, 3.0, -2.0, -0.85);
        for a in 0..3 {
            assert!((d.center[a] - b.center[a]).abs() < 1e-9);
            assert!((d.dims[a] - b.dims[a]).abs() < 1e-9);
        }
        assert!((d.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn nms_identical_pair() {
        let b = Box3D::new([0.0; 3], [4.0, 2.0, 1.5], 0.3);
        let d = [
            Detection { box3d: b, class_id: 0, score: 0.8 },
            Detection { box3d: b, class_id: 0, score: 0.9 },
        ];
        let k = nms_bev(&d, 0.5);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].score, 0.9);
        let other = [d[0], Detection { class_id: 1, ..d[1] }];
        assert_eq!(nms_bev(&other, 0.5).len(), 2);
        assert_eq!(nms_bev(&d[..1], 0.5).len(), 1);
    }

    #[test]
    fn loss_without_objects_is_negative_focal() {
        let n = 6;
        let out = HeadOutput {
            coords: (0..n).map(|i| Coord::new(i, 0, 0)).collect(),
            classes: 1,
            logits: alloc::vec![0.0; n as usize],
            reg: alloc::vec![0.3; n as usize * 8],
        };
        let cfg = HeadConfig::default();
        let v = detection_loss(&out, &[], &geom(), &cfg).unwrap();
        let expect = 0.75 * 0.25 * core::f64::consts::LN_2;
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn perfect_regression_costs_nothing() {
        let b = Box3D::new([2.4, 1.6, -0.9], [2.5, 1.5, 1.4], PI / 6.0);
        let coords: Vec<Coord> = (0..5).flat_map(|x| (0..4).map(move |y| Coord::new(x, y, 0))).collect();
        let t = head_targets(&coords, &geom(), &[b], -0.85);
        assert!(t.num_positive > 0);
        let cfg = HeadConfig::default();
        let mut tape = Tape::new();
        let cls = tape.constant(Mat::new(coords.len(), 1, alloc::vec![0.0; coords.len()]));
        let reg = tape.constant(Mat::new(coords.len(), 8, t.reg.clone()));
        let nodes = detection_loss_graph(&mut tape, cls, reg, &t, &cfg);
        assert_eq!(tape.value(nodes.reg).item(), 0.0);
    }
}
