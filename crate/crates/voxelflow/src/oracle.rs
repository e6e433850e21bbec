//! Slow reference implementations. Everything here works on dense arrays or
//! enumerates candidates exhaustively, sharing no code paths with the sparse
//! engine beyond the plain data types.

use voxelflow_core::autodiff::Activation;
use voxelflow_core::conv::ConvParams;
use voxelflow_core::detector::{Detection, HeadParams};
use voxelflow_core::dffm::DffmParams;
use voxelflow_core::eval::{Difficulty, EvalConfig};
use voxelflow_core::fsm::FsmParams;
use voxelflow_core::scene::{ClassName, GroundTruth};
use voxelflow_core::{ConvMode, Coord, SparseTensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activate(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Identity => x,
        Activation::Tanh => x.tanh(),
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

/// Zero-filled dense copy of a sparse tensor plus its occupancy mask.
struct Dense {
    grid: [usize; 3],
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl Dense {
    fn of(x: &SparseTensor) -> Dense {
        let grid = x.grid();
        let c = x.channels();
        let cells = grid[0] * grid[1] * grid[2];
        let mut d = Dense {
            grid,
            data: vec![0.0; cells * c],
            mask: vec![false; cells],
        };
        for (i, co) in x.coords().iter().enumerate() {
            let cell = d.cell([co.ix as i64, co.iy as i64, co.iz as i64]).expect("coordinate in grid");
            d.mask[cell] = true;
            d.data[cell * c..(cell + 1) * c].copy_from_slice(x.row(i));
        }
        d
    }

    fn cell(&self, p: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if p[a] < 0 || p[a] >= self.grid[a] as i64 {
                return None;
            }
        }
        Some(((p[0] as usize) * self.grid[1] + p[1] as usize) * self.grid[2] + p[2] as usize)
    }
}

/// Dense convolution masked to the sparse output rule: submanifold outputs
/// sit on the input sites, strided outputs wherever any tap touches an
/// active input.
pub fn dense_conv(x: &SparseTensor, p: &ConvParams) -> SparseTensor {
    assert_eq!(x.channels(), p.c_in, "input channels");
    let d = Dense::of(x);
    let k = p.kernel;
    let s = k.stride;
    let out_grid = match p.mode {
        ConvMode::Submanifold => d.grid,
        ConvMode::Strided => [d.grid[0].div_ceil(s), d.grid[1].div_ceil(s), d.grid[2].div_ceil(s)],
    };
    let lo = k.size.map(|n| -(((n - 1) / 2) as i64));
    let (ci, co) = (p.c_in, p.c_out);
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for ox in 0..out_grid[0] {
        for oy in 0..out_grid[1] {
            for oz in 0..out_grid[2] {
                let o = [ox as i64, oy as i64, oz as i64];
                if p.mode == ConvMode::Submanifold && !d.mask[d.cell(o).expect("in grid")] {
                    continue;
                }
                let mut acc = p.bias.clone().unwrap_or_else(|| vec![0.0; co]);
                let mut touched = false;
                let mut slot = 0;
                for a in 0..k.size[0] {
                    for b in 0..k.size[1] {
                        for c in 0..k.size[2] {
                            let off = [a as i64 + lo[0], b as i64 + lo[1], c as i64 + lo[2]];
                            let q = [0, 1, 2].map(|t| o[t] * s as i64 + k.dilation as i64 * off[t]);
                            if let Some(cell) = d.cell(q) {
                                if d.mask[cell] {
                                    touched = true;
                                    let xin = &d.data[cell * ci..(cell + 1) * ci];
                                    for (i, &xv) in xin.iter().enumerate() {
                                        for (j, y) in acc.iter_mut().enumerate() {
                                            *y += xv * p.weights[(slot * ci + i) * co + j];
                                        }
                                    }
                                }
                            }
                            slot += 1;
                        }
                    }
                }
                if p.mode == ConvMode::Strided && !touched {
                    continue;
                }
                coords.push(Coord::new(ox as u32, oy as u32, oz as u32));
                feats.extend(acc);
            }
        }
    }
    SparseTensor::new(out_grid, co, coords, feats).expect("lexicographic output")
}

fn map_features(x: &SparseTensor, f: impl Fn(f64) -> f64) -> SparseTensor {
    let v: Vec<f64> = x.features().iter().map(|&a| f(a)).collect();
    x.with_features(x.channels(), v).expect("same shape")
}

/// Dense replica of the fusion module; returns the output and the row-major gates.
pub fn dense_dffm(x: &SparseTensor, p: &DffmParams) -> (SparseTensor, Vec<f64>) {
    let n = x.len();
    let c = x.channels();
    let mut stages = Vec::new();
    let mut prev = x.clone();
    for conv in &p.stage_convs {
        let f = map_features(&dense_conv(&prev, conv), |v| activate(p.activation, v));
        stages.push(f.clone());
        prev = f;
    }
    let total = stages.len() * c;
    let mut pooled = Vec::with_capacity(2 * n);
    for r in 0..n {
        let row: Vec<f64> = stages.iter().flat_map(|s| s.row(r).to_vec()).collect();
        let mean = row.iter().sum::<f64>() / total as f64;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        pooled.push(mean);
        pooled.push(max);
    }
    let pooled = x.with_features(2, pooled).expect("pooled shape");
    let gates = map_features(&dense_conv(&pooled, &p.attention_conv), sigmoid);
    let ns = stages.len();
    let mut fused = vec![0.0; n * c];
    for r in 0..n {
        for (s, st) in stages.iter().enumerate() {
            let g = gates.features()[r * ns + s];
            for j in 0..c {
                fused[r * c + j] += g * st.row(r)[j];
            }
        }
    }
    let fused = x.with_features(c, fused).expect("fused shape");
    let out = dense_conv(&fused, &p.out_conv);
    let y: Vec<f64> = out.features().iter().zip(x.features()).map(|(a, b)| a + b).collect();
    (x.with_features(c, y).expect("output shape"), gates.features().to_vec())
}

/// Importance probability per row.
pub fn dense_fsm(x: &SparseTensor, p: &FsmParams) -> Vec<f64> {
    let h = map_features(&dense_conv(x, &p.hidden_conv), |v| activate(p.activation, v));
    dense_conv(&h, &p.out_conv).features().iter().map(|&z| sigmoid(z)).collect()
}

/// `(logits, regression)` per row of a BEV tensor.
pub fn dense_head(bev: &SparseTensor, p: &HeadParams) -> (Vec<f64>, Vec<f64>) {
    let branch = |hidden: &ConvParams, out: &ConvParams| {
        let h = map_features(&dense_conv(bev, hidden), |v| activate(p.activation, v));
        dense_conv(&h, out).features().to_vec()
    };
    (branch(&p.cls_hidden, &p.cls_out), branch(&p.reg_hidden, &p.reg_out))
}

/// Smallest `k` with `k >= ratio * n`.
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    (0..=n).find(|&k| k as f64 >= ratio * n as f64).unwrap_or(n)
}

/// Top-`ceil(ratio * n)` rows by enumerating every subset of that size and
/// keeping the one with the largest weight sum. Needs distinct weights and
/// `n <= 20`.
pub fn brute_topk(weights: &[f64], ratio: f64) -> Vec<usize> {
    let n = weights.len();
    assert!(n <= 20, "subset enumeration is exponential");
    let k = ceil_count(ratio, n);
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| weights[i]).sum();
        if best.is_none_or(|(b, _)| sum > b) {
            best = Some((sum, mask));
        }
    }
    let mask = best.map_or(0, |(_, m)| m);
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

/// Greedy NMS characterized as a fixed point: a box is kept iff no kept box of
/// the same class with a higher score overlaps it by more than `thr`. Every
/// subset is tested and the unique one satisfying the rule is returned in
/// descending score order. Needs distinct scores and at most 16 boxes.
pub fn nms_exhaustive(dets: &[Detection], thr: f64, iou: impl Fn(&Detection, &Detection) -> f64) -> Vec<Detection> {
    let n = dets.len();
    assert!(n <= 16, "subset enumeration is exponential");
    let mut found: Option<u32> = None;
    for mask in 0u32..(1 << n) {
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                mask >> j & 1 == 1
                    && dets[j].class_id == dets[i].class_id
                    && dets[j].score > dets[i].score
                    && iou(&dets[j], &dets[i]) > thr
            });
            (mask >> i & 1 == 1) == !blocked
        });
        if consistent {
            assert!(found.is_none(), "fixed point is not unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("a fixed point exists");
    let mut kept: Vec<Detection> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| dets[i]).collect();
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    kept
}

fn bucket(gt: &GroundTruth, cfg: &EvalConfig) -> Option<usize> {
    let h = gt.bbox2d[3] - gt.bbox2d[1];
    cfg.difficulty_rules
        .iter()
        .position(|r| h >= r.min_height_px && gt.occluded <= r.max_occlusion && gt.truncated <= r.max_truncation)
}

/// Whether a ground truth counts (`Some(true)`), is ignored (`Some(false)`)
/// or is unrelated (`None`) for one class and difficulty.
fn role(gt: &GroundTruth, class: ClassName, difficulty: Difficulty, cfg: &EvalConfig) -> Option<bool> {
    if gt.class_name == ClassName::DontCare {
        return Some(false);
    }
    if gt.class_name != class {
        return None;
    }
    let want = Difficulty::BUCKETS.iter().position(|&d| d == difficulty);
    Some(matches!((bucket(gt, cfg), want), (Some(b), Some(w)) if b <= w))
}

/// Recall-sampled AP by re-running the matching from scratch at every score
/// threshold and taking, per recall point, the best precision among the
/// thresholds that reach it. `None` without valid ground truth. Needs
/// distinct scores.
pub fn brute_ap(frames: &[(Vec<Detection>, Vec<GroundTruth>)], class: ClassName, difficulty: Difficulty, cfg: &EvalConfig) -> Option<f64> {
    let cid = class.class_id()?;
    let thr = cfg.iou_thresholds[cid];
    let n_valid: usize = frames
        .iter()
        .map(|(_, g)| g.iter().filter(|g| role(g, class, difficulty, cfg) == Some(true)).count())
        .sum();
    if n_valid == 0 {
        return None;
    }
    let mut table: Vec<(f64, f64)> = Vec::new();
    let scores: Vec<f64> = frames
        .iter()
        .flat_map(|(d, _)| d.iter().filter(|d| d.class_id == cid).map(|d| d.score))
        .collect();
    for &t in &scores {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut outcome_at_t = None;
        for (dets, gts) in frames {
            let mut cand: Vec<&Detection> = dets.iter().filter(|d| d.class_id == cid && d.score >= t).collect();
            cand.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite"));
            let mut used = vec![false; gts.len()];
            for d in cand {
                let mut best: Option<(usize, f64)> = None;
                let mut ignored = false;
                for (j, g) in gts.iter().enumerate() {
                    let r = role(g, class, difficulty, cfg);
                    let o = cfg.iou(&d.box3d, &g.box3d_lidar);
                    if r.is_none() || o < thr {
                        continue;
                    }
                    if r == Some(true) && !used[j] && best.is_none_or(|(_, b)| o > b) {
                        best = Some((j, o));
                    }
                    if r == Some(false) {
                        ignored = true;
                    }
                }
                let tp_hit = best.is_some();
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                } else if !ignored {
                    fp += 1;
                }
                if d.score == t {
                    outcome_at_t = Some(tp_hit || !ignored);
                }
            }
        }
        // thresholds landing on a neutral detection add no operating point
        if outcome_at_t == Some(true) {
            table.push((tp as f64 / n_valid as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let points = cfg.recall_points.points();
    let mut sum = 0.0;
    for &r in &points {
        let best = table.iter().filter(|(rec, _)| *rec >= r).map(|&(_, p)| p).fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / points.len() as f64)
}

/// Chebyshev radius of the nonzero support around `center`.
pub fn support_radius(t: &SparseTensor, center: Coord) -> u32 {
    t.coords()
        .iter()
        .enumerate()
        .filter(|(i, _)| t.row(*i).iter().any(|&v| v != 0.0))
        .map(|(_, c)| c.chebyshev(center))
        .max()
        .unwrap_or(0)
}
