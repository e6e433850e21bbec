//! Feature selection: a small importance head scores every active voxel,
//! the top fraction survives, and survivors are scaled by their score.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mat, ParamId, ParamStore, Tape, Var, PROB_CLAMP};
use crate::conv::ConvParams;
use crate::dffm::conv_shape;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::math::{ceil_fraction, ln, powf};
use crate::rulebook::{ConvMode, Kernel, RulebookCache};
use crate::sparse::{Coord, SparseTensor};
use crate::voxel::GridGeometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsmConfig {
    pub keep_ratio: f64,
    /// Weight of the importance loss in the total loss.
    pub lambda_imp: f64,
    pub alpha_f: f64,
    pub gamma_f: f64,
    /// Hidden width of the importance head.
    pub hidden: usize,
}

impl Default for FsmConfig {
    fn default() -> Self {
        FsmConfig {
            keep_ratio: 0.5,
            lambda_imp: 10.0,
            alpha_f: 0.25,
            gamma_f: 2.0,
            hidden: 16,
        }
    }
}

impl FsmConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.keep_ratio)?;
        if !(self.lambda_imp >= 0.0) {
            return Err(Error::Config(format!("lambda_imp must be nonnegative")));
        }
        if !(0.0..=1.0).contains(&self.alpha_f) || !(self.gamma_f >= 0.0) {
            return Err(Error::Config(format!("focal alpha must lie in [0, 1] and gamma be nonnegative")));
        }
        if self.hidden == 0 {
            return Err(Error::Config(format!("fsm hidden width must be positive")));
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("keep ratio {r} must lie in (0, 1]")))
    }
}

/// Importance head: 3x3x3 conv `c -> h`, activation, 1x1x1 conv `h -> 1`, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct FsmParams {
    pub hidden_conv: ConvParams,
    pub out_conv: ConvParams,
    pub activation: Activation,
}

impl FsmParams {
    pub fn zeros(channels: usize, hidden: usize, activation: Activation) -> Self {
        FsmParams {
            hidden_conv: ConvParams::zeros(Kernel::cube(3), ConvMode::Submanifold, channels, hidden, true),
            out_conv: ConvParams::zeros(Kernel::cube(1), ConvMode::Submanifold, hidden, 1, true),
            activation,
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, hidden: usize, activation: Activation, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, hidden, activation);
        for c in [&mut p.hidden_conv, &mut p.out_conv] {
            c.weights.iter_mut().for_each(|w| *w = rng.random_range(-scale..=scale));
            if let Some(b) = c.bias.as_mut() {
                b.iter_mut().for_each(|w| *w = rng.random_range(-scale..=scale));
            }
        }
        p
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        self.hidden_conv.validate()?;
        self.out_conv.validate()?;
        for (c, k) in [(&self.hidden_conv, 3), (&self.out_conv, 1)] {
            if c.mode != ConvMode::Submanifold || c.kernel != Kernel::cube(k) || c.bias.is_none() {
                return Err(Error::InvalidKernel("importance head layer has the wrong geometry"));
            }
        }
        if self.hidden_conv.c_in != channels {
            return Err(Error::ShapeMismatch {
                what: "importance head input channels",
                expected: self.hidden_conv.c_in,
                got: channels,
            });
        }
        if self.out_conv.c_in != self.hidden_conv.c_out || self.out_conv.c_out != 1 {
            return Err(Error::ShapeMismatch {
                what: "importance head output layer",
                expected: self.hidden_conv.c_out,
                got: self.out_conv.c_in,
            });
        }
        Ok(())
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<FsmIds> {
        let h = &self.hidden_conv;
        let o = &self.out_conv;
        Ok(FsmIds {
            activation: self.activation,
            hidden_w: store.add(format!("{prefix}.hidden.w"), conv_shape(h), h.weights.clone())?,
            hidden_b: store.add(format!("{prefix}.hidden.b"), alloc::vec![h.c_out], h.bias.clone().unwrap_or_default())?,
            out_w: store.add(format!("{prefix}.out.w"), conv_shape(o), o.weights.clone())?,
            out_b: store.add(format!("{prefix}.out.b"), alloc::vec![1], o.bias.clone().unwrap_or_default())?,
        })
    }

    pub fn from_store(store: &ParamStore, ids: &FsmIds) -> Self {
        let shape = store.shape(ids.hidden_w);
        let (c, h) = (shape[1], shape[2]);
        let mut p = Self::zeros(c, h, ids.activation);
        p.hidden_conv.weights = store.get(ids.hidden_w).to_vec();
        p.hidden_conv.bias = Some(store.get(ids.hidden_b).to_vec());
        p.out_conv.weights = store.get(ids.out_w).to_vec();
        p.out_conv.bias = Some(store.get(ids.out_b).to_vec());
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsmIds {
    pub activation: Activation,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Records the head on `tape` and returns the `rows x 1` logit column.
pub fn fsm_graph(tape: &mut Tape, x: Var, store: &ParamStore, ids: &FsmIds, cache: &mut RulebookCache) -> Result<Var> {
    let rb3 = cache.get(Kernel::cube(3), ConvMode::Submanifold)?;
    let rb1 = cache.get(Kernel::cube(1), ConvMode::Submanifold)?;
    let w = tape.param(store, ids.hidden_w);
    let b = tape.param(store, ids.hidden_b);
    let h = tape.conv(x, w, Some(b), rb3);
    let h = tape.activate(h, ids.activation);
    let w = tape.param(store, ids.out_w);
    let b = tape.param(store, ids.out_b);
    Ok(tape.conv(h, w, Some(b), rb1))
}

/// Importance weight in `(0, 1)` for every active voxel, in row order.
pub fn predict_importance(f: &SparseTensor, p: &FsmParams) -> Result<Vec<f64>> {
    p.validate(f.channels())?;
    if f.is_empty() {
        return Ok(Vec::new());
    }
    let mut store = ParamStore::new();
    let ids = p.register(&mut store, "fsm")?;
    let mut tape = Tape::new();
    let x = tape.constant(Mat::new(f.len(), f.channels(), f.features().to_vec()));
    let mut cache = RulebookCache::new(f);
    let logits = fsm_graph(&mut tape, x, &store, &ids, &mut cache)?;
    let probs = tape.sigmoid(logits);
    Ok(tape.value(probs).data.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResult {
    /// One weight per input row.
    pub weights: Vec<f64>,
    /// Smallest kept weight (0 when nothing is active).
    pub threshold: f64,
    /// Kept input rows, ascending.
    pub kept_rows: Vec<usize>,
    pub keep_ratio: f64,
}

/// Rows ranked by weight, highest first; equal weights keep row order.
pub fn rank_rows(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    order
}

/// Indices of the `ceil(keep_ratio * N)` highest weights, ascending.
pub fn topk_rows(weights: &[f64], keep_ratio: f64) -> Result<Vec<usize>> {
    check_ratio(keep_ratio)?;
    let k = ceil_fraction(keep_ratio, weights.len());
    let mut kept = rank_rows(weights);
    kept.truncate(k);
    kept.sort_unstable();
    Ok(kept)
}

/// Keeps the top `ceil(keep_ratio * N)` voxels and multiplies each kept
/// feature row by its weight. Dropped voxels leave the active set.
pub fn select_topk(t: &SparseTensor, weights: &[f64], keep_ratio: f64) -> Result<(SparseTensor, ImportanceResult)> {
    if weights.len() != t.len() {
        return Err(Error::LengthMismatch {
            expected: t.len(),
            got: weights.len(),
        });
    }
    let kept = topk_rows(weights, keep_ratio)?;
    let threshold = kept.iter().map(|&r| weights[r]).fold(f64::INFINITY, f64::min);
    let threshold = if kept.is_empty() { 0.0 } else { threshold };
    let c = t.channels();
    let coords: Vec<Coord> = kept.iter().map(|&r| t.coords()[r]).collect();
    let mut features = Vec::with_capacity(kept.len() * c);
    for &r in &kept {
        let w = weights[r];
        features.extend(t.row(r).iter().map(|v| w * v));
    }
    let out = SparseTensor::from_canonical(t.grid(), c, coords, features);
    Ok((
        out,
        ImportanceResult {
            weights: weights.to_vec(),
            threshold,
            kept_rows: kept,
            keep_ratio,
        },
    ))
}

/// 1 for voxels whose center lies in any box (faces count as inside), else 0.
pub fn fsm_targets(coords: &[Coord], geom: &GridGeometry, boxes: &[Box3D]) -> Vec<f64> {
    coords
        .iter()
        .map(|&c| {
            let p = geom.center(c);
            if boxes.iter().any(|b| b.contains(p)) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean focal loss over probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(probs: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: probs.len(),
            got: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let q = 1.0 - p;
        total += -alpha * y * powf(q, gamma) * ln(p) - (1.0 - alpha) * (1.0 - y) * powf(p, gamma) * ln(q);
    }
    Ok(total / probs.len() as f64)
}

/// Uniformly random `ceil(keep_fraction * N)` voxels with unscaled features.
pub fn random_mask_probe<R: Rng + ?Sized>(t: &SparseTensor, keep_fraction: f64, rng: &mut R) -> Result<SparseTensor> {
    let rows = random_subset(t.len(), keep_fraction, rng)?;
    Ok(t.select_rows(&rows))
}

/// Ascending random subset of `0..n` of size `ceil(fraction * n)`.
pub fn random_subset<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    check_ratio(fraction)?;
    let k = ceil_fraction(fraction, n);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    perm.truncate(k);
    perm.sort_unstable();
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_tensor(n: usize, c: usize) -> SparseTensor {
        let coords = (0..n as u32).map(|i| Coord::new(i, 0, 0)).collect();
        let features = (0..n * c).map(|i| i as f64 + 1.0).collect();
        SparseTensor::new([n.max(1), 1, 1], c, coords, features).unwrap()
    }

    #[test]
    fn worked_selection() {
        let t = line_tensor(4, 2);
        let (out, r) = select_topk(&t, &[0.9, 0.7, 0.3, 0.1], 0.5).unwrap();
        assert_eq!(r.kept_rows, alloc::vec![0, 1]);
        assert_eq!(r.threshold, 0.7);
        assert_eq!(out.features(), &[0.9, 1.8, 0.7 * 3.0, 0.7 * 4.0]);
    }

    #[test]
    fn ties_follow_canonical_order() {
        let t = line_tensor(4, 1);
        let (_, r) = select_topk(&t, &[0.5; 4], 0.5).unwrap();
        assert_eq!(r.kept_rows, alloc::vec![0, 1]);
        let (_, r) = select_topk(&line_tensor(1, 1), &[0.2], 0.01).unwrap();
        assert_eq!(r.kept_rows, alloc::vec![0]);
    }

    #[test]
    fn selection_errors() {
        let t = line_tensor(3, 1);
        assert_eq!(select_topk(&t, &[0.1], 0.5).unwrap_err(), Error::LengthMismatch { expected: 3, got: 1 });
        assert!(matches!(select_topk(&t, &[0.1; 3], 0.0), Err(Error::Config(_))));
        assert!(matches!(select_topk(&t, &[0.1; 3], 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_half() {
        let t = line_tensor(5, 3);
        let p = FsmParams::zeros(3, 4, Activation::Silu);
        assert_eq!(predict_importance(&t, &p).unwrap(), alloc::vec![0.5; 5]);
        assert!(predict_importance(&SparseTensor::empty([2; 3], 3), &p).unwrap().is_empty());
        assert!(matches!(predict_importance(&line_tensor(2, 2), &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn focal_values() {
        let v = focal_loss(&[0.5], &[1.0], 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * core::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.043322).abs() < 1e-6);
        assert!(focal_loss(&[1.0], &[1.0], 0.25, 2.0).unwrap() < 1e-12);
        let p = [0.3, 0.8, 0.6];
        let y = [1.0, 0.0, 1.0];
        let bce: f64 = p.iter().zip(&y).map(|(&p, &y): (&f64, &f64)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 3.0;
        assert!((focal_loss(&p, &y, 0.5, 0.0).unwrap() - 0.5 * bce).abs() < 1e-15);
        assert_eq!(focal_loss(&[], &[], 0.25, 2.0), Err(Error::EmptyBatch));
    }

    #[test]
    fn targets_on_rotated_face() {
        let geom = GridGeometry {
            origin: [0.0; 3],
            cell: [1.0; 3],
        };
        // voxel (0,0,0) has center (0.5, 0.5, 0.5)
        let b = Box3D::new([0.5, 0.5, 0.5], [2.0, 2.0, 2.0], PI / 4.0);
        assert_eq!(fsm_targets(&[Coord::new(0, 0, 0), Coord::new(9, 9, 0)], &geom, &[b]), alloc::vec![1.0, 0.0]);
        let s = core::f64::consts::FRAC_1_SQRT_2;
        // box of half-length 1 yawed 45 degrees; (0.5 + s, 0.5 + s) lies on its +x face
        let face = [0.5 + s, 0.5 + s, 0.5];
        let geom = GridGeometry {
            origin: [face[0] - 0.5, face[1] - 0.5, 0.0],
            cell: [1.0; 3],
        };
        let c = geom.center(Coord::new(0, 0, 0));
        let (dx, dy) = (c[0] - 0.5, c[1] - 0.5);
        let (sn, cs) = ((-b.yaw).sin(), (-b.yaw).cos());
        let (lx, ly) = (cs * dx - sn * dy, sn * dx + cs * dy);
        let want = if lx.abs() <= 1.0 && ly.abs() <= 1.0 && (c[2] - 0.5).abs() <= 1.0 { 1.0 } else { 0.0 };
        assert_eq!(fsm_targets(&[Coord::new(0, 0, 0)], &geom, &[b]), alloc::vec![want]);
    }

    #[test]
    fn probe_counts_and_determinism() {
        let t = line_tensor(10, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(random_mask_probe(&t, 1.0, &mut rng).unwrap(), t);
        let a = random_mask_probe(&t, 0.5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = random_mask_probe(&t, 0.5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(a.coords().iter().all(|c| t.find(*c).is_some()));
    }
}
